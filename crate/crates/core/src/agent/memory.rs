//! Candidate Bus, user-profile tiers, and the on-disk long-term profile store.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::llm::BYTES_PER_TOKEN;

pub(crate) fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// One tool invocation as seen on the bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    /// 1-based turn number within the session.
    pub turn: usize,
    /// 1-based step index within the plan.
    pub step: usize,
    pub tool: String,
    pub input_summary: String,
    pub output_summary: String,
    pub started_ms: u64,
    pub ended_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ExecutionRecord {
    /// Copy with timestamps cleared, for comparing runs.
    pub fn without_timing(&self) -> Self {
        Self { started_ms: 0, ended_ms: 0, ..self.clone() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateBus {
    pub current: Vec<String>,
    pub trace: Vec<ExecutionRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LongTermProfile {
    pub user_id: String,
    pub likes: BTreeMap<String, f64>,
    pub disliked: BTreeSet<String>,
}

impl LongTermProfile {
    pub fn new(user_id: impl Into<String>) -> Self {
        Self { user_id: user_id.into(), ..Self::default() }
    }

    pub fn weight(&self, id: &str) -> f64 {
        self.likes.get(id).copied().unwrap_or(0.0)
    }

    pub fn like(&mut self, id: &str) {
        self.disliked.remove(id);
        *self.likes.entry(id.to_string()).or_insert(0.0) += 1.0;
    }

    pub fn dislike(&mut self, id: &str) {
        self.likes.remove(id);
        self.disliked.insert(id.to_string());
    }

    /// Liked ids by descending weight, then id.
    pub fn ranked_likes(&self) -> Vec<(&str, f64)> {
        let mut v: Vec<(&str, f64)> =
            self.likes.iter().filter(|(_, w)| **w > 0.0).map(|(k, w)| (k.as_str(), *w)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortTermMemory {
    pub intent: String,
    pub liked: BTreeSet<String>,
    pub disliked: BTreeSet<String>,
}

impl ShortTermMemory {
    pub fn like(&mut self, id: &str) {
        self.disliked.remove(id);
        self.liked.insert(id.to_string());
    }

    pub fn dislike(&mut self, id: &str) {
        self.liked.remove(id);
        self.disliked.insert(id.to_string());
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub long_term: LongTermProfile,
    pub short_term: ShortTermMemory,
}

/// Likes, dislikes and intent distilled from one turn.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnEvents {
    pub liked: Vec<String>,
    pub disliked: Vec<String>,
    pub intent: String,
}

fn join_ids<'a>(ids: impl IntoIterator<Item = &'a String>) -> String {
    ids.into_iter().map(String::as_str).collect::<Vec<_>>().join(", ")
}

/// Short-term intent, then session likes/dislikes, then long-term likes by weight,
/// cut to a prefix of at most `budget` tokens.
pub fn summarize_profile(profile: &UserProfile, budget: usize) -> String {
    let mut lines = Vec::new();
    let st = &profile.short_term;
    if !st.intent.trim().is_empty() {
        lines.push(format!("Current intent: {}", st.intent.trim()));
    }
    if !st.liked.is_empty() {
        lines.push(format!("Liked this session: {}", join_ids(&st.liked)));
    }
    if !st.disliked.is_empty() {
        lines.push(format!("Disliked this session: {}", join_ids(&st.disliked)));
    }
    let likes = profile.long_term.ranked_likes();
    if !likes.is_empty() {
        let parts: Vec<String> = likes.iter().map(|(id, w)| format!("{id} ({w})")).collect();
        lines.push(format!("Long-term likes: {}", parts.join(", ")));
    }
    let full = lines.join("\n");
    let mut cut = full.len().min(budget.saturating_mul(BYTES_PER_TOKEN));
    while !full.is_char_boundary(cut) {
        cut -= 1;
    }
    full[..cut].to_string()
}

fn encode_user_id(user_id: &str) -> String {
    let mut out = String::with_capacity(user_id.len());
    for b in user_id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// Long-term profiles shared by every session of a user. Reads go through a per-user
/// lock; disk writes for one user are serialized by the same lock.
#[derive(Debug, Default)]
pub struct ProfileStore {
    dir: Option<PathBuf>,
    cells: Mutex<HashMap<String, Arc<RwLock<LongTermProfile>>>>,
}

impl ProfileStore {
    /// Store persisting one JSON file per user under `dir`.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, AgentError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| AgentError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: Some(dir), cells: Mutex::default() })
    }

    /// Store that never touches disk.
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn path_for(&self, user_id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.json", encode_user_id(user_id))))
    }

    fn read(&self, user_id: &str) -> Result<LongTermProfile, AgentError> {
        let Some(path) = self.path_for(user_id) else {
            return Ok(LongTermProfile::new(user_id));
        };
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| AgentError::Io(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(LongTermProfile::new(user_id)),
            Err(e) => Err(AgentError::Io(format!("{}: {e}", path.display()))),
        }
    }

    /// Shared cell for `user_id`, loaded from disk on first use.
    pub fn profile(&self, user_id: &str) -> Result<Arc<RwLock<LongTermProfile>>, AgentError> {
        let mut cells = self.cells.lock().expect("profile store poisoned");
        if let Some(cell) = cells.get(user_id) {
            return Ok(cell.clone());
        }
        let cell = Arc::new(RwLock::new(self.read(user_id)?));
        cells.insert(user_id.to_string(), cell.clone());
        Ok(cell)
    }

    pub fn flush(&self, user_id: &str) -> Result<(), AgentError> {
        let cell = self.cells.lock().expect("profile store poisoned").get(user_id).cloned();
        let (Some(cell), Some(path)) = (cell, self.path_for(user_id)) else {
            return Ok(());
        };
        // write lock: one writer per user at a time
        let profile = cell.write().expect("profile poisoned");
        let bytes = serde_json::to_vec_pretty(&*profile).expect("profile serializes");
        let tmp = path.with_extension("json.tmp");
        let io = |e: std::io::Error| AgentError::Io(format!("{}: {e}", path.display()));
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, &path).map_err(io)?;
        Ok(())
    }

    pub fn flush_all(&self) -> Result<(), AgentError> {
        let users: Vec<String> = self.cells.lock().expect("profile store poisoned").keys().cloned().collect();
        for u in users {
            self.flush(&u)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::count_tokens;

    #[test]
    fn like_twice_then_dislike() {
        let mut p = LongTermProfile::new("u");
        p.like("A");
        p.like("A");
        assert_eq!(p.weight("A"), 2.0);
        p.dislike("A");
        assert_eq!(p.weight("A"), 0.0);
        assert!(p.disliked.contains("A"));
        p.like("A");
        assert!(!p.disliked.contains("A"));
    }

    #[test]
    fn summary_order_and_budget() {
        let mut profile = UserProfile::default();
        assert_eq!(summarize_profile(&profile, 100), "");
        profile.short_term.intent = "a long intent about cozy farming games with co-op".into();
        profile.short_term.like("g3");
        profile.long_term.like("g1");
        profile.long_term.like("g2");
        profile.long_term.like("g2");
        let full = summarize_profile(&profile, 1000);
        assert_eq!(
            full,
            "Current intent: a long intent about cozy farming games with co-op\nLiked this session: g3\nLong-term likes: g2 (2), g1 (1)"
        );
        assert_eq!(summarize_profile(&profile, 0), "");
        let short = summarize_profile(&profile, 5);
        assert!(count_tokens(&short) <= 5);
        assert!(full.starts_with(&short));
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        let mut profile = UserProfile::default();
        profile.short_term.intent = "ééééééééé".into();
        for b in 0..12 {
            let s = summarize_profile(&profile, b);
            assert!(count_tokens(&s) <= b);
        }
    }

    #[test]
    fn user_ids_are_encoded() {
        assert_eq!(encode_user_id("u-1_a"), "u-1_a");
        assert_eq!(encode_user_id("../x y"), "%2E%2E%2Fx%20y");
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ProfileStore::open(dir.path()).unwrap();
        store.profile("alice").unwrap().write().unwrap().like("g1");
        store.flush_all().unwrap();
        let bytes = fs::read(store.path_for("alice").unwrap()).unwrap();
        let reopened = ProfileStore::open(dir.path()).unwrap();
        let p = reopened.profile("alice").unwrap().read().unwrap().clone();
        assert_eq!(p.weight("g1"), 1.0);
        reopened.flush("alice").unwrap();
        assert_eq!(fs::read(reopened.path_for("alice").unwrap()).unwrap(), bytes);
    }
}
