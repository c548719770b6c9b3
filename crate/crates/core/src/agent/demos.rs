//! Demonstration library and intent-similarity selection.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::plan::{parse_plan, validate_plan, ToolPlan, ToolRegistry};
use super::AgentError;
use crate::retrieval::{Embedder, EmbeddingVector};

/// An (intent, plan) exemplar for the planner prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub intent: String,
    pub plan: ToolPlan,
}

#[derive(Deserialize)]
struct DemoLine {
    intent: String,
    plan: Value,
}

#[derive(Debug, Clone, Default)]
pub struct DemoLibrary {
    demos: Vec<Demonstration>,
}

impl DemoLibrary {
    /// Every plan must validate against `registry`. `$bus` at step 1 is accepted since a
    /// demo may illustrate a follow-up turn.
    pub fn new(demos: Vec<Demonstration>, registry: &ToolRegistry) -> Result<Self, AgentError> {
        for (i, d) in demos.iter().enumerate() {
            check_demo(d, registry, i + 1)?;
        }
        Ok(Self { demos })
    }

    /// JSON lines of `{"intent":...,"plan":{"plan":[...]}}`; blank lines are skipped.
    pub fn load<R: BufRead>(source: R, registry: &ToolRegistry) -> Result<Self, AgentError> {
        let mut demos = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let line = line.map_err(|e| AgentError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| AgentError::BadDemo { line: i + 1, reason };
            let raw: DemoLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let (plan, _) = parse_plan(&raw.plan.to_string()).map_err(bad)?;
            let demo = Demonstration { intent: raw.intent, plan };
            check_demo(&demo, registry, i + 1)?;
            demos.push(demo);
        }
        Ok(Self { demos })
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }
}

fn check_demo(d: &Demonstration, registry: &ToolRegistry, line: usize) -> Result<(), AgentError> {
    if d.intent.trim().is_empty() {
        return Err(AgentError::BadDemo { line, reason: "empty intent".into() });
    }
    let violations = validate_plan(&d.plan, registry, true);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(AgentError::BadDemo { line, reason: violations.join("; ") })
    }
}

/// Top-`m` demonstrations by cosine similarity of intents; ties keep library order.
pub fn select_demonstrations<'a>(
    library: &'a DemoLibrary,
    embedder: &dyn Embedder,
    intent: &str,
    m: usize,
) -> Result<Vec<&'a Demonstration>, AgentError> {
    let query = embedder.embed(intent)?;
    let intents: Vec<String> = library.demos.iter().map(|d| d.intent.clone()).collect();
    let vectors: Vec<EmbeddingVector> = embedder.embed_batch(&intents)?;
    let mut scored: Vec<(usize, f64)> = vectors.iter().map(|v| query.cosine(v)).enumerate().collect();
    // stable sort keeps insertion order among equal scores
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored.into_iter().take(m).map(|(i, _)| &library.demos[i]).collect())
}
