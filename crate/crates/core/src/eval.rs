//! Evaluation toolkit: fuzzy name resolution, ranking metrics, generative and embedding
//! recommendation evaluation, simulated conversations, and pairwise judging.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{AttrValue, Catalog};
use crate::llm::{ChatBackend, ChatMessage, CompletionParams, LlmError};
use crate::retrieval::{Embedder, ItemIndex, RetrievalError};

pub const DEFAULT_FUZZY_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("fuzzy threshold must be in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("invalid simulator script: {0}")]
    InvalidScript(String),
    #[error("judge reply {0:?} is not one of A, B, TIE")]
    JudgeFormat(String),
    #[error("reports have different metric keys")]
    IncompatibleReports,
    #[error("agent error: {0}")]
    Agent(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Casefold, replace non-alphanumerics with spaces, collapse whitespace, trim.
pub fn normalize_name(text: &str) -> String {
    let mapped: String =
        text.chars().flat_map(char::to_lowercase).map(|c| if c.is_alphanumeric() { c } else { ' ' }).collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - lev / max_len` over normalized names; `None` when both normalize to empty.
pub fn name_similarity(a: &str, b: &str) -> Option<f64> {
    normalized_similarity(&normalize_name(a), &normalize_name(b))
}

fn normalized_similarity(a: &str, b: &str) -> Option<f64> {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return None;
    }
    Some(1.0 - levenshtein(a, b) as f64 / longest as f64)
}

/// Best-matching catalog item for a generated name, if its similarity reaches `threshold`.
pub fn fuzzy_match(name: &str, catalog: &Catalog, threshold: f64) -> Option<(String, f64)> {
    let wanted = normalize_name(name);
    let mut best: Option<(&str, f64)> = None;
    for item in catalog.items() {
        let Some(sim) = normalized_similarity(&wanted, &normalize_name(&item.title)) else { continue };
        best = match best {
            Some((id, s)) if s > sim || (s == sim && id <= item.id.as_str()) => Some((id, s)),
            _ => Some((item.id.as_str(), sim)),
        };
    }
    best.filter(|(_, s)| *s >= threshold).map(|(id, s)| (id.to_string(), s))
}

/// True when some window of words in `text` fuzzy-matches `title`.
pub fn mentions_title(text: &str, title: &str, threshold: f64) -> bool {
    let title = normalize_name(title);
    if title.is_empty() {
        return false;
    }
    let words: Vec<String> = normalize_name(text).split(' ').map(str::to_string).collect();
    let n = title.split(' ').count();
    for size in n.saturating_sub(1).max(1)..=n + 1 {
        for window in words.windows(size.min(words.len()).max(1)) {
            if normalized_similarity(&window.join(" "), &title).is_some_and(|s| s >= threshold) {
                return true;
            }
        }
    }
    false
}

fn hits<S: AsRef<str>>(ranked: &[S], gt: &BTreeSet<String>, k: usize) -> Vec<bool> {
    let mut seen = HashSet::new();
    ranked
        .iter()
        .take(k)
        .map(|id| {
            let id = id.as_ref();
            gt.contains(id) && seen.insert(id.to_string())
        })
        .collect()
}

/// Binary-relevance NDCG over the top `k` positions.
pub fn ndcg_at_k<S: AsRef<str>>(ranked: &[S], gt: &BTreeSet<String>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    let dcg: f64 =
        hits(ranked, gt, k).iter().enumerate().filter(|(_, h)| **h).map(|(i, _)| 1.0 / ((i + 2) as f64).log2()).sum();
    if dcg == 0.0 {
        return Ok(0.0);
    }
    let idcg: f64 = (0..k.min(gt.len())).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    Ok(dcg / idcg)
}

/// `|gt ∩ top-k| / |gt|`.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[S], gt: &BTreeSet<String>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if gt.is_empty() {
        return Ok(0.0);
    }
    let found = hits(ranked, gt, k).into_iter().filter(|h| *h).count();
    Ok(found as f64 / gt.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

impl Tally {
    pub fn total(&self) -> usize {
        self.wins + self.losses + self.ties
    }

    pub fn record(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::Win => self.wins += 1,
            Outcome::Loss => self.losses += 1,
            Outcome::Tie => self.ties += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub tallies: BTreeMap<String, Tally>,
    pub cases: usize,
    pub failures: usize,
}

impl EvalReport {
    /// Plain-text table: one row per metric and per tally.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>10}", "metric", "value");
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "{k:<24} {v:>10.4}");
        }
        for (k, t) in &self.tallies {
            let _ =
                writeln!(out, "{:<24} {:>10}", format!("{k} (W/L/T)"), format!("{}/{}/{}", t.wins, t.losses, t.ties));
        }
        let _ = writeln!(out, "{:<24} {:>10}", "cases", self.cases);
        let _ = writeln!(out, "{:<24} {:>10}", "failures", self.failures);
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

fn averaged(per_case: Vec<BTreeMap<String, f64>>) -> EvalReport {
    let cases = per_case.len();
    let mut metrics: BTreeMap<String, f64> = BTreeMap::new();
    for m in &per_case {
        for (k, v) in m {
            *metrics.entry(k.clone()).or_insert(0.0) += v;
        }
    }
    for v in metrics.values_mut() {
        *v /= cases as f64;
    }
    EvalReport { metrics, cases, ..EvalReport::default() }
}

fn ranking_metrics<S: AsRef<str>>(ranked: &[S], gt: &BTreeSet<String>, ks: &[usize]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for &k in ks {
        out.insert(format!("ndcg@{k}"), ndcg_at_k(ranked, gt, k)?);
        out.insert(format!("recall@{k}"), recall_at_k(ranked, gt, k)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenEvalCase {
    pub output: Vec<String>,
    pub gt: Vec<String>,
}

/// Resolves generated names through fuzzy matching; unresolved names stay in place as misses.
pub fn eval_generative(cases: &[GenEvalCase], catalog: &Catalog, ks: &[usize], threshold: f64) -> Result<EvalReport> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(EvalError::InvalidThreshold(threshold));
    }
    let mut per_case = Vec::with_capacity(cases.len());
    for case in cases {
        let ranked: Vec<String> = case
            .output
            .iter()
            .map(|name| fuzzy_match(name, catalog, threshold).map(|(id, _)| id).unwrap_or_default())
            .collect();
        let gt: BTreeSet<String> = case.gt.iter().filter(|g| !g.is_empty()).cloned().collect();
        per_case.push(ranking_metrics(&ranked, &gt, ks)?);
    }
    Ok(averaged(per_case))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCase {
    pub query: String,
    pub gt: Vec<String>,
}

/// Ranks the whole catalog by cosine to each query and averages NDCG/Recall.
pub fn eval_embedding(
    embedder: &dyn Embedder,
    catalog: &Catalog,
    cases: &[EmbeddingCase],
    ks: &[usize],
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Ok(EvalReport::default());
    }
    let index = ItemIndex::build(catalog, embedder)?;
    eval_embedding_with_index(embedder, &index, cases, ks)
}

pub fn eval_embedding_with_index(
    embedder: &dyn Embedder,
    index: &ItemIndex,
    cases: &[EmbeddingCase],
    ks: &[usize],
) -> Result<EvalReport> {
    let mut per_case = Vec::with_capacity(cases.len());
    for case in cases {
        let q = embedder.embed(&case.query)?;
        let ranked: Vec<String> = index.scan(&q).into_iter().map(|(id, _)| id).collect();
        let gt: BTreeSet<String> = case.gt.iter().cloned().collect();
        per_case.push(ranking_metrics(&ranked, &gt, ks)?);
    }
    Ok(averaged(per_case))
}

// ---------------------------------------------------------------------------
// conversation

/// A conversational system under test; one instance per simulated conversation.
pub trait Conversation {
    fn reply(&mut self, utterance: &str) -> Result<String, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorScript {
    pub targets: Vec<String>,
    pub utterances: Vec<String>,
    pub max_turns: usize,
    #[serde(default)]
    pub user_id: Option<String>,
}

impl SimulatorScript {
    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        if self.max_turns == 0 {
            return Err(EvalError::InvalidScript("max_turns must be at least 1".into()));
        }
        if self.utterances.is_empty() || self.utterances.iter().any(|u| u.trim().is_empty()) {
            return Err(EvalError::InvalidScript("utterance templates must be non-empty".into()));
        }
        if self.targets.is_empty() {
            return Err(EvalError::InvalidScript("no target items".into()));
        }
        if let Some(bad) = self.targets.iter().find(|t| !catalog.contains(t)) {
            return Err(EvalError::InvalidScript(format!("unknown target {bad}")));
        }
        Ok(())
    }

    /// Template for turn `i` (0-based); the last template repeats once the list runs out.
    pub fn utterance(&self, turn: usize, catalog: &Catalog) -> String {
        let template = &self.utterances[turn.min(self.utterances.len() - 1)];
        match self.targets.first().and_then(|t| catalog.get(t)) {
            Some(item) => fill_template(template, &item.title, &item.attributes),
            None => template.clone(),
        }
    }
}

/// Replaces `{title}` and `{<attribute>}` placeholders.
fn fill_template(template: &str, title: &str, attrs: &BTreeMap<String, AttrValue>) -> String {
    let mut out = template.replace("{title}", title);
    for (name, value) in attrs {
        out = out.replace(&format!("{{{name}}}"), &value.to_string());
    }
    out
}

/// Source of simulated-user utterances.
pub trait UserSimulator {
    fn next_utterance(&mut self, turn: usize, history: &[ChatMessage]) -> Result<String>;
}

/// Deterministic simulator driven by the script's templates.
pub struct ScriptedSimulator<'a> {
    pub script: &'a SimulatorScript,
    pub catalog: &'a Catalog,
}

impl UserSimulator for ScriptedSimulator<'_> {
    fn next_utterance(&mut self, turn: usize, _history: &[ChatMessage]) -> Result<String> {
        Ok(self.script.utterance(turn, self.catalog))
    }
}

/// Simulator backed by a chat model that role-plays a user looking for the target item.
pub struct LlmSimulator<'a> {
    pub backend: &'a dyn ChatBackend,
    pub script: &'a SimulatorScript,
    pub catalog: &'a Catalog,
}

impl UserSimulator for LlmSimulator<'_> {
    fn next_utterance(&mut self, turn: usize, history: &[ChatMessage]) -> Result<String> {
        let target = self.script.targets.first().and_then(|t| self.catalog.get(t));
        let description = target.map_or_else(String::new, |it| self.catalog.item_text(it));
        let mut messages = vec![ChatMessage::system(format!(
            "You are a user chatting with a recommender system. You are looking for an item like: {description}\n\
             Never name the item. Describe what you want in one short sentence."
        ))];
        // the simulator sees the dialogue with roles swapped
        for m in history {
            let flipped = match m.role {
                crate::llm::Role::User => ChatMessage::assistant(m.content.clone()),
                _ => ChatMessage::user(m.content.clone()),
            };
            messages.push(flipped);
        }
        messages.push(ChatMessage::user(format!("Opening hint: {}", self.script.utterance(turn, self.catalog))));
        Ok(self.backend.chat(&messages, &CompletionParams::default())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub success: bool,
    pub turns_used: usize,
}

/// Drives one conversation until the system names a target or the turn budget runs out.
pub fn simulate_conversation(
    conversation: &mut dyn Conversation,
    simulator: &mut dyn UserSimulator,
    script: &SimulatorScript,
    catalog: &Catalog,
    threshold: f64,
) -> Result<SimOutcome> {
    script.validate(catalog)?;
    let titles: Vec<&str> = script.targets.iter().filter_map(|t| catalog.get(t)).map(|it| it.title.as_str()).collect();
    let mut history = Vec::new();
    for turn in 0..script.max_turns {
        let utterance = simulator.next_utterance(turn, &history)?;
        let reply = conversation.reply(&utterance).map_err(EvalError::Agent)?;
        let hit = titles.iter().any(|t| mentions_title(&reply, t, threshold));
        history.push(ChatMessage::user(utterance));
        history.push(ChatMessage::assistant(reply));
        if hit {
            return Ok(SimOutcome { success: true, turns_used: turn + 1 });
        }
    }
    Ok(SimOutcome { success: false, turns_used: script.max_turns })
}

/// Runs every script against a fresh conversation; agent errors count as failures.
pub fn eval_conversation<F>(
    scripts: &[SimulatorScript],
    catalog: &Catalog,
    threshold: f64,
    mut new_conversation: F,
) -> Result<EvalReport>
where
    F: FnMut(&SimulatorScript) -> Box<dyn Conversation>,
{
    let mut report = EvalReport { cases: scripts.len(), ..EvalReport::default() };
    if scripts.is_empty() {
        return Ok(report);
    }
    let mut successes = 0usize;
    let mut turns = 0usize;
    for script in scripts {
        let mut conv = new_conversation(script);
        let mut sim = ScriptedSimulator { script, catalog };
        match simulate_conversation(conv.as_mut(), &mut sim, script, catalog, threshold) {
            Ok(o) => {
                successes += usize::from(o.success);
                if o.success {
                    turns += o.turns_used;
                }
            }
            Err(EvalError::Agent(_)) | Err(EvalError::Llm(_)) => report.failures += 1,
            Err(e) => return Err(e),
        }
    }
    report.metrics.insert("success_rate".into(), successes as f64 / scripts.len() as f64);
    // 1.0 when every success came on the first turn
    let efficiency = if successes == 0 { 0.0 } else { successes as f64 / turns as f64 };
    report.metrics.insert("first_turn_efficiency".into(), efficiency);
    Ok(report)
}

// ---------------------------------------------------------------------------
// pairwise judging

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rubric {
    Explanation,
    Chitchat,
}

impl Rubric {
    pub fn criteria(self) -> [&'static str; 3] {
        match self {
            Rubric::Explanation => ["informativeness", "persuasiveness", "helpfulness"],
            Rubric::Chitchat => ["helpfulness", "relevance", "thoroughness"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Rubric::Explanation => "explanation",
            Rubric::Chitchat => "chitchat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Loss,
    Tie,
}

/// Outcome for system A against system B under one rubric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub rubric: Rubric,
    pub outcome: Outcome,
}

pub const JUDGE_REPAIR: &str = "Answer with exactly one of: A, B, TIE.";

/// Opening of the repair message sent after a malformed verdict.
pub const JUDGE_REPAIR_PREFIX: &str = "Your previous reply was not a valid verdict.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pick {
    First,
    Second,
    Tie,
}

fn parse_pick(reply: &str) -> Option<Pick> {
    match reply.trim() {
        "A" => Some(Pick::First),
        "B" => Some(Pick::Second),
        "TIE" => Some(Pick::Tie),
        _ => None,
    }
}

fn judge_once(judge: &dyn ChatBackend, prompt: &str, first: &str, second: &str, rubric: Rubric) -> Result<Pick> {
    let [c1, c2, c3] = rubric.criteria();
    let comparison = format!("Prompt:\n{prompt}\n\nResponse A:\n{first}\n\nResponse B:\n{second}");
    let mut messages = vec![
        ChatMessage::system(format!(
            "You are an impartial judge. Compare two responses to the same prompt on {c1}, {c2} and {c3}. {JUDGE_REPAIR}"
        )),
        ChatMessage::user(format!("{comparison}\n\nWhich response is better overall? {JUDGE_REPAIR}")),
    ];
    let params = CompletionParams { max_tokens: 8, ..CompletionParams::default() };
    let reply = judge.chat(&messages, &params)?;
    if let Some(p) = parse_pick(&reply) {
        return Ok(p);
    }
    messages.push(ChatMessage::assistant(reply));
    messages.push(ChatMessage::user(format!("{JUDGE_REPAIR_PREFIX} {JUDGE_REPAIR}\n\n{comparison}")));
    let repaired = judge.chat(&messages, &params)?;
    parse_pick(&repaired).ok_or(EvalError::JudgeFormat(repaired))
}

/// Judges in both presentation orders; agreement decides, disagreement is a tie.
pub fn pairwise_judge(judge: &dyn ChatBackend, prompt: &str, a: &str, b: &str, rubric: Rubric) -> Result<JudgeVerdict> {
    let forward = match judge_once(judge, prompt, a, b, rubric)? {
        Pick::First => Outcome::Win,
        Pick::Second => Outcome::Loss,
        Pick::Tie => Outcome::Tie,
    };
    let backward = match judge_once(judge, prompt, b, a, rubric)? {
        Pick::First => Outcome::Loss,
        Pick::Second => Outcome::Win,
        Pick::Tie => Outcome::Tie,
    };
    let outcome = if forward == backward { forward } else { Outcome::Tie };
    Ok(JudgeVerdict { rubric, outcome })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedCase {
    pub prompt: String,
    pub a: String,
    pub b: String,
}

/// Tallies wins/losses/ties of system A over all cases; judge errors count as failures.
pub fn eval_judged(judge: &dyn ChatBackend, cases: &[JudgedCase], rubric: Rubric) -> EvalReport {
    let mut tally = Tally::default();
    let mut failures = 0;
    for case in cases {
        match pairwise_judge(judge, &case.prompt, &case.a, &case.b, rubric) {
            Ok(v) => tally.record(v.outcome),
            Err(_) => failures += 1,
        }
    }
    let mut report = EvalReport { cases: cases.len() - failures, failures, ..EvalReport::default() };
    if !cases.is_empty() {
        report.tallies.insert(rubric.name().to_string(), tally);
    }
    report
}

/// Case-weighted means of metrics, summed tallies and counts.
pub fn aggregate_report(reports: &[EvalReport]) -> Result<EvalReport> {
    let mut out = EvalReport::default();
    let keyed: Vec<&EvalReport> = reports.iter().filter(|r| r.cases > 0 && !r.metrics.is_empty()).collect();
    if let Some(first) = keyed.first() {
        let keys: Vec<&String> = first.metrics.keys().collect();
        if keyed.iter().any(|r| r.metrics.keys().collect::<Vec<_>>() != keys) {
            return Err(EvalError::IncompatibleReports);
        }
        let weight: usize = keyed.iter().map(|r| r.cases).sum();
        for key in keys {
            let total: f64 = keyed.iter().map(|r| r.metrics[key] * r.cases as f64).sum();
            out.metrics.insert(key.clone(), total / weight as f64);
        }
    }
    for r in reports {
        out.cases += r.cases;
        out.failures += r.failures;
        for (k, t) in &r.tallies {
            let e = out.tallies.entry(k.clone()).or_default();
            e.wins += t.wins;
            e.losses += t.losses;
            e.ties += t.ties;
        }
    }
    Ok(out)
}
