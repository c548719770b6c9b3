//! Item ranking tool. The default ranker scores candidates by cosine-normalized
//! item-item co-occurrence with the user's history.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::InteractionStore;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankError {
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("no candidates to rank")]
    NoCandidates,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("remote error {status}: {body}")]
    Remote { status: u16, body: String },
}

pub type Result<T, E = RankError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankRequest {
    pub candidates: Vec<String>,
    pub history: Vec<String>,
    /// Reserved for profile-aware rankers; the co-occurrence ranker ignores it.
    pub profile: Option<String>,
}

pub trait Ranker: Send + Sync {
    fn rank(&self, req: &RankRequest) -> Result<Vec<(String, f64)>>;
}

/// Symmetric co-occurrence counts over distinct per-user item sets.
#[derive(Debug, Clone, Default)]
pub struct CoocModel {
    index: HashMap<String, usize>,
    ids: Vec<String>,
    pop: Vec<u64>,
    pairs: HashMap<(usize, usize), u64>,
}

fn key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl CoocModel {
    pub fn fit(store: &InteractionStore) -> Self {
        let ids: Vec<String> = store.item_ids().map(str::to_string).collect();
        let index: HashMap<String, usize> = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let mut pop = vec![0u64; ids.len()];
        let mut pairs = HashMap::new();
        for (_, records) in store.users() {
            let items: BTreeSet<usize> = records.iter().filter_map(|r| index.get(&r.item_id).copied()).collect();
            let items: Vec<usize> = items.into_iter().collect();
            for (n, &i) in items.iter().enumerate() {
                pop[i] += 1;
                for &j in &items[n + 1..] {
                    *pairs.entry(key(i, j)).or_insert(0) += 1;
                }
            }
        }
        Self { index, ids, pop, pairs }
    }

    pub fn contains(&self, item: &str) -> bool {
        self.index.contains_key(item)
    }

    /// Number of users who interacted with `item`.
    pub fn pop(&self, item: &str) -> u64 {
        self.index.get(item).map_or(0, |&i| self.pop[i])
    }

    /// Number of users who interacted with both items; 0 for identical ids.
    pub fn cooc(&self, a: &str, b: &str) -> u64 {
        match (self.index.get(a), self.index.get(b)) {
            (Some(&i), Some(&j)) if i != j => self.pairs.get(&key(i, j)).copied().unwrap_or(0),
            _ => 0,
        }
    }

    /// `cooc(h, item) / sqrt(pop(h) * pop(item))`, zero when either popularity is zero.
    pub fn contribution(&self, history_item: &str, item: &str) -> f64 {
        if history_item == item {
            return 0.0;
        }
        let (ph, pi) = (self.pop(history_item), self.pop(item));
        if ph == 0 || pi == 0 {
            return 0.0;
        }
        self.cooc(history_item, item) as f64 / ((ph * pi) as f64).sqrt()
    }

    pub fn score(&self, history: &[String], item: &str) -> Result<f64> {
        if !self.contains(item) {
            return Err(RankError::UnknownItem(item.to_string()));
        }
        let mut seen = HashSet::new();
        Ok(history.iter().filter(|h| seen.insert(h.as_str())).map(|h| self.contribution(h, item)).sum())
    }

    pub fn item_ids(&self) -> &[String] {
        &self.ids
    }
}

/// Removes duplicate ids, keeping first occurrences.
pub fn dedup_preserving(ids: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    ids.iter().filter(|id| seen.insert(id.as_str())).cloned().collect()
}

impl Ranker for CoocModel {
    /// Score descending, then popularity descending, then id ascending.
    fn rank(&self, req: &RankRequest) -> Result<Vec<(String, f64)>> {
        let candidates = dedup_preserving(&req.candidates);
        if candidates.is_empty() {
            return Err(RankError::NoCandidates);
        }
        let mut scored = candidates
            .into_iter()
            .map(|c| {
                let s = self.score(&req.history, &c)?;
                Ok((c, s))
            })
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1).then_with(|| self.pop(&b.0).cmp(&self.pop(&a.0))).then_with(|| a.0.cmp(&b.0))
        });
        Ok(scored)
    }
}

/// Ranker served over HTTP: POST `{"candidates","history","profile"}` → `{"ranking":[{"id","score"}]}`.
pub struct HttpRanker {
    url: String,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct RemoteRankRequest<'a> {
    candidates: &'a [String],
    history: &'a [String],
    profile: &'a str,
}

#[derive(Deserialize)]
struct RemoteRanked {
    id: String,
    score: f64,
}

#[derive(Deserialize)]
struct RemoteRankResponse {
    ranking: Vec<RemoteRanked>,
}

impl HttpRanker {
    pub fn new(url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self { url: url.into(), agent }
    }
}

impl Ranker for HttpRanker {
    fn rank(&self, req: &RankRequest) -> Result<Vec<(String, f64)>> {
        let candidates = dedup_preserving(&req.candidates);
        if candidates.is_empty() {
            return Err(RankError::NoCandidates);
        }
        let body = RemoteRankRequest {
            candidates: &candidates,
            history: &req.history,
            profile: req.profile.as_deref().unwrap_or(""),
        };
        let mut resp = self.agent.post(&self.url).send_json(&body).map_err(|e| RankError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status >= 400 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(RankError::Remote { status, body });
        }
        let parsed: RemoteRankResponse =
            resp.body_mut().read_json().map_err(|e| RankError::Transport(e.to_string()))?;
        let allowed: HashSet<&str> = candidates.iter().map(String::as_str).collect();
        if let Some(bad) = parsed.ranking.iter().find(|r| !allowed.contains(r.id.as_str())) {
            return Err(RankError::UnknownItem(bad.id.clone()));
        }
        Ok(parsed.ranking.into_iter().map(|r| (r.id, r.score)).collect())
    }
}
