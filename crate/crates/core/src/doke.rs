//! Prompt knowledge injection: extract domain knowledge, select what fits a token budget,
//! verbalize it, and insert it into chat prompts without touching model parameters.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, Item};
use crate::llm::{count_tokens, ChatMessage, Role};
use crate::ranker::CoocModel;

pub const KNOWLEDGE_HEADER: &str = "Relevant domain knowledge:";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DokeError {
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("max_hops must be 1 or 2, got {0}")]
    InvalidHops(usize),
    #[error("top_n must be at least 1")]
    InvalidTopN,
    #[error("malformed triple at line {line}: {reason}")]
    MalformedTriple { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T, E = DokeError> = std::result::Result<T, E>;

/// Declaration order is the tie-break priority in [`select_knowledge`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnippetKind {
    AttributeFact,
    Cooccurrence,
    KgPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSnippet {
    pub kind: SnippetKind,
    pub text: String,
    pub relevance: f64,
    pub token_cost: usize,
}

impl KnowledgeSnippet {
    pub fn new(kind: SnippetKind, text: impl Into<String>, relevance: f64) -> Self {
        let text = text.into();
        let token_cost = count_tokens(&text);
        Self { kind, text, relevance, token_cost }
    }
}

/// `"<title>'s <attr> is <value>."` for each whitelisted attribute the item carries.
pub fn extract_attribute_facts(item: &Item, whitelist: &[String]) -> Vec<KnowledgeSnippet> {
    whitelist
        .iter()
        .filter_map(|attr| {
            item.attr(attr).map(|v| {
                KnowledgeSnippet::new(SnippetKind::AttributeFact, format!("{}'s {} is {}.", item.title, attr, v), 1.0)
            })
        })
        .collect()
}

/// Collaborative signals between the user's history and one candidate, strongest first.
pub fn extract_cooc_signals(
    model: &CoocModel,
    catalog: &Catalog,
    history: &[String],
    candidate: &str,
    top_n: usize,
) -> Result<Vec<KnowledgeSnippet>> {
    if top_n == 0 {
        return Err(DokeError::InvalidTopN);
    }
    let cand = catalog.get(candidate).filter(|_| model.contains(candidate));
    let cand = cand.ok_or_else(|| DokeError::UnknownItem(candidate.to_string()))?;
    let mut seen = HashSet::new();
    let mut contributions: Vec<(&str, f64)> = history
        .iter()
        .filter(|h| h.as_str() != candidate && seen.insert(h.as_str()))
        .map(|h| (h.as_str(), model.contribution(h, candidate)))
        .filter(|(_, c)| *c > 0.0)
        .collect();
    contributions.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(contributions
        .into_iter()
        .take(top_n)
        .map(|(h, c)| {
            let title = catalog.get(h).map_or(h, |it| it.title.as_str());
            let text = format!(
                "Users who engaged with {} also engaged with {} ({} co-occurrences).",
                title,
                cand.title,
                model.cooc(h, candidate)
            );
            KnowledgeSnippet::new(SnippetKind::Cooccurrence, text, c)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// One traversal step; `forward` is false when the triple was walked tail-to-head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hop {
    pub from: String,
    pub relation: String,
    pub to: String,
    pub forward: bool,
}

/// Renders `A —rel→ B` for forward hops and `A ←rel— B` for reverse ones.
pub fn render_path(hops: &[Hop], label: &dyn Fn(&str) -> String) -> String {
    let mut out = match hops.first() {
        Some(h) => label(&h.from),
        None => return String::new(),
    };
    for h in hops {
        if h.forward {
            out.push_str(&format!(" —{}→ {}", h.relation, label(&h.to)));
        } else {
            out.push_str(&format!(" ←{}— {}", h.relation, label(&h.to)));
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    triples: BTreeSet<Triple>,
    // entity -> (relation, neighbour, forward)
    adjacency: BTreeMap<String, Vec<(String, String, bool)>>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a triple; returns false for a duplicate. Relations must be non-empty.
    pub fn insert(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        assert!(!relation.is_empty(), "relation must be non-empty");
        let t = Triple { head: head.into(), relation: relation.into(), tail: tail.into() };
        if !self.triples.insert(t) {
            return false;
        }
        self.adjacency.entry(head.into()).or_default().push((relation.into(), tail.into(), true));
        self.adjacency.entry(tail.into()).or_default().push((relation.into(), head.into(), false));
        true
    }

    /// Reads `head<TAB>relation<TAB>tail` lines; duplicate lines are ignored.
    pub fn load<R: BufRead>(source: R) -> Result<Self> {
        let mut kg = Self::new();
        for (i, line) in source.lines().enumerate() {
            let line = line.map_err(|e| DokeError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 || f.iter().any(|s| s.is_empty()) {
                return Err(DokeError::MalformedTriple {
                    line: i + 1,
                    reason: "expected three non-empty fields".into(),
                });
            }
            kg.insert(f[0], f[1], f[2]);
        }
        Ok(kg)
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains_entity(&self, e: &str) -> bool {
        self.adjacency.contains_key(e)
    }

    /// All simple paths of 1..=max_hops edges from `source` to `target`, edges walked either way.
    pub fn paths(&self, source: &str, target: &str, max_hops: usize) -> Vec<Vec<Hop>> {
        let mut out = Vec::new();
        if source == target {
            return out;
        }
        let mut stack = Vec::new();
        let mut visited = vec![source.to_string()];
        self.walk(source, target, max_hops, &mut stack, &mut visited, &mut out);
        out
    }

    fn walk(
        &self,
        at: &str,
        target: &str,
        remaining: usize,
        stack: &mut Vec<Hop>,
        visited: &mut Vec<String>,
        out: &mut Vec<Vec<Hop>>,
    ) {
        if remaining == 0 {
            return;
        }
        for (rel, next, forward) in self.adjacency.get(at).map(Vec::as_slice).unwrap_or(&[]) {
            if visited.iter().any(|v| v == next) {
                continue;
            }
            stack.push(Hop { from: at.into(), relation: rel.clone(), to: next.clone(), forward: *forward });
            if next == target {
                out.push(stack.clone());
            } else {
                visited.push(next.clone());
                self.walk(next, target, remaining - 1, stack, visited, out);
                visited.pop();
            }
            stack.pop();
        }
    }
}

/// Reasoning-path snippets from any source to the target, relevance `1 / length`.
pub fn extract_kg_paths(
    kg: &KnowledgeGraph,
    sources: &[String],
    target: &str,
    max_hops: usize,
) -> Result<Vec<KnowledgeSnippet>> {
    extract_kg_paths_labeled(kg, sources, target, max_hops, &|e| e.to_string())
}

/// As [`extract_kg_paths`], rendering entities through `label` (e.g. item id → title).
pub fn extract_kg_paths_labeled(
    kg: &KnowledgeGraph,
    sources: &[String],
    target: &str,
    max_hops: usize,
    label: &dyn Fn(&str) -> String,
) -> Result<Vec<KnowledgeSnippet>> {
    if !(1..=2).contains(&max_hops) {
        return Err(DokeError::InvalidHops(max_hops));
    }
    if !kg.contains_entity(target) {
        return Err(DokeError::UnknownEntity(target.to_string()));
    }
    let sources: BTreeSet<&str> = sources.iter().map(String::as_str).collect();
    if let Some(bad) = sources.iter().find(|s| !kg.contains_entity(s)) {
        return Err(DokeError::UnknownEntity(bad.to_string()));
    }
    let mut out = Vec::new();
    for source in sources {
        let mut rendered: Vec<(String, usize)> =
            kg.paths(source, target, max_hops).into_iter().map(|p| (render_path(&p, label), p.len())).collect();
        rendered.sort();
        out.extend(
            rendered.into_iter().map(|(text, len)| KnowledgeSnippet::new(SnippetKind::KgPath, text, 1.0 / len as f64)),
        );
    }
    Ok(out)
}

fn selection_order(a: &KnowledgeSnippet, b: &KnowledgeSnippet) -> Ordering {
    b.relevance.total_cmp(&a.relevance).then_with(|| a.kind.cmp(&b.kind)).then_with(|| a.text.cmp(&b.text))
}

/// Greedy selection by descending relevance: a snippet is taken iff it fits what is left of the budget.
pub fn select_knowledge(snippets: &[KnowledgeSnippet], token_budget: usize) -> Vec<KnowledgeSnippet> {
    let mut sorted: Vec<&KnowledgeSnippet> = snippets.iter().collect();
    sorted.sort_by(|a, b| selection_order(a, b));
    let mut left = token_budget;
    let mut out = Vec::new();
    for s in sorted {
        if s.token_cost <= left {
            left -= s.token_cost;
            out.push(s.clone());
        }
    }
    out
}

pub fn verbalize(snippets: &[KnowledgeSnippet]) -> String {
    if snippets.is_empty() {
        return String::new();
    }
    let mut out = String::from(KNOWLEDGE_HEADER);
    for s in snippets {
        out.push('\n');
        out.push_str(&s.text);
    }
    out
}

/// Inserts `knowledge` as a system message right before the final user message.
pub fn augment_prompt(messages: &[ChatMessage], knowledge: &str) -> Vec<ChatMessage> {
    let mut out = messages.to_vec();
    if knowledge.is_empty() {
        return out;
    }
    let at = out.iter().rposition(|m| m.role == Role::User).unwrap_or(out.len());
    out.insert(at, ChatMessage::system(knowledge));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DokeConfig {
    pub budget_tokens: usize,
    pub top_n: usize,
    pub max_hops: usize,
    /// Attributes turned into facts; empty means every schema attribute.
    pub attributes: Vec<String>,
}

impl Default for DokeConfig {
    fn default() -> Self {
        Self { budget_tokens: 200, top_n: 3, max_hops: 2, attributes: Vec::new() }
    }
}

/// Runs extract → select → verbalize for a candidate list and a user history.
#[derive(Clone)]
pub struct KnowledgePlugin {
    pub config: DokeConfig,
    catalog: Arc<Catalog>,
    model: Arc<CoocModel>,
    kg: Option<Arc<KnowledgeGraph>>,
}

impl KnowledgePlugin {
    pub fn new(
        config: DokeConfig,
        catalog: Arc<Catalog>,
        model: Arc<CoocModel>,
        kg: Option<Arc<KnowledgeGraph>>,
    ) -> Self {
        Self { config, catalog, model, kg }
    }

    pub fn extract(&self, history: &[String], candidates: &[String]) -> Vec<KnowledgeSnippet> {
        let whitelist: Vec<String> = if self.config.attributes.is_empty() {
            self.catalog.schema().iter().map(|a| a.name.clone()).collect()
        } else {
            self.config.attributes.clone()
        };
        let mut out = Vec::new();
        for cand in candidates {
            let Some(item) = self.catalog.get(cand) else { continue };
            out.extend(extract_attribute_facts(item, &whitelist));
            if let Ok(sig) = extract_cooc_signals(&self.model, &self.catalog, history, cand, self.config.top_n.max(1)) {
                out.extend(sig);
            }
            if let Some(kg) = &self.kg {
                let sources: Vec<String> = history.iter().filter(|h| kg.contains_entity(h)).cloned().collect();
                if !sources.is_empty() && kg.contains_entity(cand) {
                    let label = |e: &str| self.catalog.get(e).map_or_else(|| e.to_string(), |it| it.title.clone());
                    if let Ok(paths) =
                        extract_kg_paths_labeled(kg, &sources, cand, self.config.max_hops.clamp(1, 2), &label)
                    {
                        out.extend(paths);
                    }
                }
            }
        }
        out
    }

    pub fn knowledge_text(&self, history: &[String], candidates: &[String]) -> String {
        verbalize(&select_knowledge(&self.extract(history, candidates), self.config.budget_tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{load_catalog, InteractionRecord, InteractionStore};

    fn snippet(cost: usize, relevance: f64, tag: &str) -> KnowledgeSnippet {
        // cost tokens of text: 4 bytes per token
        let mut text = tag.to_string();
        while text.len() < cost * 4 {
            text.push('.');
        }
        let s = KnowledgeSnippet::new(SnippetKind::AttributeFact, text, relevance);
        assert_eq!(s.token_cost, cost);
        s
    }

    #[test]
    fn attribute_facts() {
        let cat = load_catalog(
            r#"{"schema":[{"name":"price","kind":"number"},{"name":"tags","kind":"text-list"},{"name":"genre","kind":"text"}]}
{"id":"x","title":"X","attributes":{"price":19.99,"tags":["a","b"]}}
"#
            .as_bytes(),
        )
        .unwrap();
        let item = cat.get("x").unwrap();
        assert!(extract_attribute_facts(item, &[]).is_empty());
        let facts = extract_attribute_facts(item, &["price".into(), "genre".into(), "tags".into()]);
        assert_eq!(facts.len(), 2);
        assert_eq!(facts[0].text, "X's price is 19.99.");
        assert_eq!(facts[0].kind, SnippetKind::AttributeFact);
        assert_eq!(facts[0].relevance, 1.0);
        assert_eq!(facts[1].text, "X's tags is a, b.");
    }

    fn cooc_fixture() -> (Catalog, CoocModel) {
        let cat = load_catalog(
            "{\"schema\":[]}\n{\"id\":\"A\",\"title\":\"Alpha\"}\n{\"id\":\"B\",\"title\":\"Beta\"}\n{\"id\":\"C\",\"title\":\"Gamma\"}\n{\"id\":\"D\",\"title\":\"Delta\"}\n"
                .as_bytes(),
        )
        .unwrap();
        let rec = |u: &str, i: &str| InteractionRecord { user_id: u.into(), item_id: i.into(), timestamp: 0 };
        let store = InteractionStore::from_records(
            [rec("u1", "A"), rec("u1", "B"), rec("u2", "A"), rec("u2", "B"), rec("u2", "C")],
            &cat,
        );
        let model = CoocModel::fit(&store);
        (cat, model)
    }

    #[test]
    fn cooc_signals() {
        let (cat, m) = cooc_fixture();
        let s = extract_cooc_signals(&m, &cat, &["A".into()], "C", 3).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0].relevance - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[0].text, "Users who engaged with Alpha also engaged with Gamma (1 co-occurrences).");
        assert!(extract_cooc_signals(&m, &cat, &["D".into()], "C", 3).unwrap().is_empty());
        // contributions to C: A -> 1/sqrt(2), B -> 1/sqrt(2); to B: A -> 1.0, C -> 1/sqrt(2)
        let top = extract_cooc_signals(&m, &cat, &["C".into(), "A".into()], "B", 1).unwrap();
        assert_eq!(top.len(), 1);
        assert!(top[0].text.starts_with("Users who engaged with Alpha"));
        assert!((top[0].relevance - 1.0).abs() < 1e-12);
        assert_eq!(extract_cooc_signals(&m, &cat, &[], "Z", 1).unwrap_err(), DokeError::UnknownItem("Z".into()));
    }

    #[test]
    fn kg_two_hop() {
        let mut kg = KnowledgeGraph::new();
        kg.insert("A", "directed_by", "P");
        kg.insert("B", "directed_by", "P");
        let s = extract_kg_paths(&kg, &["A".into()], "B", 2).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].text, "A —directed_by→ P ←directed_by— B");
        assert_eq!(s[0].relevance, 0.5);
        assert!(extract_kg_paths(&kg, &["A".into()], "B", 1).unwrap().is_empty());
        assert!(extract_kg_paths(&kg, &["A".into()], "A", 2).unwrap().is_empty());
        assert_eq!(extract_kg_paths(&kg, &["A".into()], "B", 3).unwrap_err(), DokeError::InvalidHops(3));
        assert_eq!(extract_kg_paths(&kg, &["Q".into()], "B", 2).unwrap_err(), DokeError::UnknownEntity("Q".into()));
    }

    #[test]
    fn kg_load() {
        let kg = KnowledgeGraph::load("a\tr\tb\na\tr\tb\n\nb\ts\tc\n".as_bytes()).unwrap();
        assert_eq!(kg.len(), 2);
        assert!(KnowledgeGraph::load("a\tb\n".as_bytes()).is_err());
    }

    #[test]
    fn greedy_selection() {
        let s = [snippet(5, 3.0, "a"), snippet(4, 2.0, "b"), snippet(3, 1.0, "c")];
        let picked: Vec<usize> = select_knowledge(&s, 8).iter().map(|x| x.token_cost).collect();
        assert_eq!(picked, [5, 3]);
        assert!(select_knowledge(&s, 0).is_empty());
        assert_eq!(select_knowledge(&s, 100).len(), 3);
    }

    #[test]
    fn selection_tie_breaks() {
        let fact = KnowledgeSnippet::new(SnippetKind::AttributeFact, "zz", 1.0);
        let path = KnowledgeSnippet::new(SnippetKind::KgPath, "aa", 1.0);
        let co = KnowledgeSnippet::new(SnippetKind::Cooccurrence, "mm", 1.0);
        let out = select_knowledge(&[path, co, fact], 10);
        let kinds: Vec<SnippetKind> = out.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, [SnippetKind::AttributeFact, SnippetKind::Cooccurrence, SnippetKind::KgPath]);
    }

    #[test]
    fn larger_budget_can_swap_out_a_skip_filled_snippet() {
        // greedy-with-skip is not monotone in the budget
        let s = [snippet(5, 3.0, "a"), snippet(4, 2.0, "b"), snippet(3, 1.0, "c")];
        let at8: Vec<usize> = select_knowledge(&s, 8).iter().map(|x| x.token_cost).collect();
        let at9: Vec<usize> = select_knowledge(&s, 9).iter().map(|x| x.token_cost).collect();
        assert_eq!(at8, [5, 3]);
        assert_eq!(at9, [5, 4]);
    }

    #[test]
    fn verbalize_lines() {
        assert_eq!(verbalize(&[]), "");
        let one = verbalize(&[snippet(1, 1.0, "x")]);
        assert_eq!(one.lines().count(), 2);
        assert!(one.starts_with(KNOWLEDGE_HEADER));
        let three = verbalize(&[snippet(1, 1.0, "x"), snippet(1, 1.0, "y"), snippet(1, 1.0, "z")]);
        assert_eq!(three.lines().count(), 4);
    }

    #[test]
    fn augment() {
        let base = vec![
            ChatMessage::system("s"),
            ChatMessage::user("u1"),
            ChatMessage::assistant("a"),
            ChatMessage::user("u2"),
        ];
        assert_eq!(augment_prompt(&base, ""), base);
        let k = "Relevant domain knowledge:\nfoo";
        let out = augment_prompt(&base, k);
        assert_eq!(out.len(), 5);
        assert_eq!(out[3], ChatMessage::system(k));
        assert_eq!(out[4], ChatMessage::user("u2"));
        let grown = crate::llm::count_message_tokens(&out) - crate::llm::count_message_tokens(&base);
        assert_eq!(grown, count_tokens(k));
    }

    #[test]
    fn plugin_respects_budget() {
        let (cat, m) = cooc_fixture();
        let plugin = KnowledgePlugin::new(
            DokeConfig { budget_tokens: 20, ..DokeConfig::default() },
            Arc::new(cat),
            Arc::new(m),
            None,
        );
        let text = plugin.knowledge_text(&["A".into()], &["B".into(), "C".into()]);
        assert!(text.starts_with(KNOWLEDGE_HEADER));
        let body: usize = text.lines().skip(1).map(count_tokens).sum();
        assert!(body <= 20);
    }
}
