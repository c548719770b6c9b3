//! Built-in tools: information query, item retrieval, item ranking.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use super::plan::{ArgKind, ArgSpec, ToolDescriptor, ToolRegistry};
use super::AgentError;
use crate::catalog::{Catalog, CatalogError, QueryExpr};
use crate::ranker::{RankError, RankRequest, Ranker};
use crate::retrieval::{retrieve, Embedder, ItemIndex, RetrievalError, RetrievalRequest};

#[derive(Debug, Clone, PartialEq)]
pub enum ArgValue {
    Text(String),
    Number(f64),
    Ids(Vec<String>),
}

/// Arguments after `$bus` resolution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToolInput(pub BTreeMap<String, ArgValue>);

impl ToolInput {
    pub fn text(&self, name: &str) -> Option<&str> {
        match self.0.get(name) {
            Some(ArgValue::Text(s)) => Some(s),
            _ => None,
        }
    }

    pub fn number(&self, name: &str) -> Option<f64> {
        match self.0.get(name) {
            Some(ArgValue::Number(n)) => Some(*n),
            _ => None,
        }
    }

    pub fn ids(&self, name: &str) -> Option<&[String]> {
        match self.0.get(name) {
            Some(ArgValue::Ids(v)) => Some(v),
            _ => None,
        }
    }

    /// Compact one-line rendering for traces.
    pub fn summary(&self) -> String {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|(k, v)| match v {
                ArgValue::Text(s) => format!("{k}={s:?}"),
                ArgValue::Number(n) => format!("{k}={n}"),
                ArgValue::Ids(ids) => format!("{k}=[{}]", ids.join(",")),
            })
            .collect();
        parts.join(" ")
    }
}

/// What a tool sees besides its arguments.
pub struct ToolContext<'a> {
    pub catalog: &'a Catalog,
    /// The user's interaction history plus liked items, disliked items removed.
    pub history: &'a [String],
    pub profile_summary: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolOutput {
    pub text: String,
    /// Item ids produced by the step; `Some` overwrites the bus.
    pub items: Option<Vec<String>>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("{0}")]
    Invalid(String),
}

pub trait Tool: Send + Sync {
    fn run(&self, input: &ToolInput, ctx: &ToolContext<'_>) -> Result<ToolOutput, ToolError>;
}

fn list_items(catalog: &Catalog, ids: &[String], scores: Option<&[f64]>) -> String {
    if ids.is_empty() {
        return "No matching items.".into();
    }
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            let title = catalog.get(id).map_or(id.as_str(), |it| it.title.as_str());
            match scores {
                Some(s) => format!("{}. {} ({}) score {:.4}", i + 1, title, id, s[i]),
                None => format!("{}. {} ({})", i + 1, title, id),
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Answers questions about item details by running a filter query.
pub struct QueryTool {
    pub catalog: Arc<Catalog>,
}

impl QueryTool {
    pub fn descriptor() -> ToolDescriptor {
        ToolDescriptor {
            name: "query".into(),
            description: "Look up item details (attributes such as price, genre, release year) with a filter \
                          expression, e.g. genre = 'RPG' AND price < 20 ORDER BY price ASC LIMIT 5."
                .into(),
            args: vec![ArgSpec::required("filter", ArgKind::Text)],
            produces_candidates: true,
        }
    }
}

impl Tool for QueryTool {
    fn run(&self, input: &ToolInput, _ctx: &ToolContext<'_>) -> Result<ToolOutput, ToolError> {
        let filter = input.text("filter").ok_or_else(|| ToolError::Invalid("missing filter".into()))?;
        let q = QueryExpr::parse_for(filter, &self.catalog)?;
        let ids = self.catalog.run_query(&q)?;
        let text = if ids.is_empty() {
            "No matching items.".to_string()
        } else {
            ids.iter()
                .filter_map(|id| self.catalog.get(id))
                .map(|it| {
                    let attrs: Vec<String> = self
                        .catalog
                        .schema()
                        .iter()
                        .filter_map(|a| it.attr(&a.name).map(|v| format!("{}={}", a.name, v)))
                        .collect();
                    format!("{} ({}): {}", it.title, it.id, attrs.join(", "))
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        Ok(ToolOutput { text, items: Some(ids) })
    }
}

/// Hard conditions through the query engine, soft conditions through the embedding index.
pub struct RetrieveTool {
    pub catalog: Arc<Catalog>,
    pub index: Arc<ItemIndex>,
    pub embedder: Arc<dyn Embedder>,
}

impl RetrieveTool {
    pub fn descriptor() -> ToolDescriptor {
        ToolDescriptor {
            name: "retrieve".into(),
            description: "Find candidate items. 'hard' is a filter expression for explicit constraints; \
                          'soft' is free text for preferences that need semantic matching; give at least one."
                .into(),
            args: vec![
                ArgSpec::optional("hard", ArgKind::Text),
                ArgSpec::optional("soft", ArgKind::Text),
                ArgSpec::required("k", ArgKind::PositiveInt),
            ],
            produces_candidates: true,
        }
    }
}

impl Tool for RetrieveTool {
    fn run(&self, input: &ToolInput, _ctx: &ToolContext<'_>) -> Result<ToolOutput, ToolError> {
        let k = input.number("k").unwrap_or(0.0) as usize;
        let hard = input.text("hard").map(|h| QueryExpr::parse_for(h, &self.catalog)).transpose()?;
        let soft = input.text("soft").map(str::to_string);
        let req = RetrievalRequest { hard, soft, k };
        let ids = retrieve(&self.catalog, &self.index, self.embedder.as_ref(), &req)?;
        Ok(ToolOutput { text: list_items(&self.catalog, &ids, None), items: Some(ids) })
    }
}

/// Orders candidates by predicted preference given the user's history.
pub struct RankTool {
    pub catalog: Arc<Catalog>,
    pub ranker: Arc<dyn Ranker>,
}

impl RankTool {
    pub fn descriptor() -> ToolDescriptor {
        ToolDescriptor {
            name: "rank".into(),
            description: "Rank candidate items by how well they fit the user's history and profile; \
                          pass \"$bus\" to rank the current candidates."
                .into(),
            args: vec![
                ArgSpec::required("candidates", ArgKind::Candidates),
                ArgSpec::optional("k", ArgKind::PositiveInt),
            ],
            produces_candidates: true,
        }
    }
}

impl Tool for RankTool {
    fn run(&self, input: &ToolInput, ctx: &ToolContext<'_>) -> Result<ToolOutput, ToolError> {
        let candidates = input.ids("candidates").unwrap_or_default().to_vec();
        if let Some(bad) = candidates.iter().find(|c| !self.catalog.contains(c)) {
            return Err(ToolError::UnknownItem(bad.clone()));
        }
        let req = RankRequest {
            candidates,
            history: ctx.history.to_vec(),
            profile: (!ctx.profile_summary.is_empty()).then(|| ctx.profile_summary.to_string()),
        };
        let mut ranked = self.ranker.rank(&req)?;
        if let Some(k) = input.number("k") {
            ranked.truncate(k as usize);
        }
        let (ids, scores): (Vec<String>, Vec<f64>) = ranked.into_iter().unzip();
        Ok(ToolOutput { text: list_items(&self.catalog, &ids, Some(&scores)), items: Some(ids) })
    }
}

/// Shared resources behind the three core tools.
#[derive(Clone)]
pub struct Toolkit {
    pub catalog: Arc<Catalog>,
    pub index: Arc<ItemIndex>,
    pub embedder: Arc<dyn Embedder>,
    pub ranker: Arc<dyn Ranker>,
}

impl Toolkit {
    /// Registry holding `chat`, `query`, `retrieve` and `rank`.
    pub fn registry(&self) -> Result<ToolRegistry, AgentError> {
        let mut reg = ToolRegistry::new();
        reg.register(QueryTool::descriptor(), Arc::new(QueryTool { catalog: self.catalog.clone() }))?;
        reg.register(
            RetrieveTool::descriptor(),
            Arc::new(RetrieveTool {
                catalog: self.catalog.clone(),
                index: self.index.clone(),
                embedder: self.embedder.clone(),
            }),
        )?;
        reg.register(
            RankTool::descriptor(),
            Arc::new(RankTool { catalog: self.catalog.clone(), ranker: self.ranker.clone() }),
        )?;
        Ok(reg)
    }
}

#[cfg(test)]
struct StubTool;

#[cfg(test)]
impl Tool for StubTool {
    fn run(&self, _input: &ToolInput, _ctx: &ToolContext<'_>) -> Result<ToolOutput, ToolError> {
        Ok(ToolOutput { text: String::new(), items: Some(Vec::new()) })
    }
}

#[cfg(test)]
impl ToolRegistry {
    /// Core descriptors backed by no-op handlers.
    pub(crate) fn with_stub_tools(mut self) -> Self {
        for d in [QueryTool::descriptor(), RetrieveTool::descriptor(), RankTool::descriptor()] {
            self.register(d, Arc::new(StubTool)).unwrap();
        }
        self
    }
}
