//! Tool registry, the plan wire format, and plan validation.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::tools::{Tool, ToolInput};
use super::AgentError;

/// Sentinel resolving to the Candidate Bus contents at invocation time.
pub const BUS: &str = "$bus";

/// Reserved tool name routing a turn straight to response generation.
pub const CHAT_TOOL: &str = "chat";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArgKind {
    Text,
    Number,
    PositiveInt,
    Ids,
    /// `"$bus"` or an explicit id list.
    Candidates,
}

impl ArgKind {
    fn describe(self) -> &'static str {
        match self {
            ArgKind::Text => "text",
            ArgKind::Number => "number",
            ArgKind::PositiveInt => "positive integer",
            ArgKind::Ids => "list of item ids",
            ArgKind::Candidates => "\"$bus\" or list of item ids",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgSpec {
    pub name: String,
    pub kind: ArgKind,
    pub required: bool,
}

impl ArgSpec {
    pub fn required(name: &str, kind: ArgKind) -> Self {
        Self { name: name.into(), kind, required: true }
    }

    pub fn optional(name: &str, kind: ArgKind) -> Self {
        Self { name: name.into(), kind, required: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    pub args: Vec<ArgSpec>,
    /// Steps of this tool overwrite the bus with their item ids.
    pub produces_candidates: bool,
}

impl ToolDescriptor {
    /// Description line used verbatim in planner prompts.
    pub fn prompt_line(&self) -> String {
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| {
                format!("{} ({}, {})", a.name, a.kind.describe(), if a.required { "required" } else { "optional" })
            })
            .collect();
        if args.is_empty() {
            format!("- {}: {} Arguments: none.", self.name, self.description)
        } else {
            format!("- {}: {} Arguments: {}.", self.name, self.description, args.join(", "))
        }
    }
}

fn chat_descriptor() -> ToolDescriptor {
    ToolDescriptor {
        name: CHAT_TOOL.into(),
        description: "Reply conversationally without consulting any tool; use it alone for small talk.".into(),
        args: Vec::new(),
        produces_candidates: false,
    }
}

/// Registered tools in registration order. The reserved `chat` tool is always present.
#[derive(Clone)]
pub struct ToolRegistry {
    tools: Vec<(ToolDescriptor, Option<Arc<dyn Tool>>)>,
}

impl Default for ToolRegistry {
    fn default() -> Self {
        Self { tools: vec![(chat_descriptor(), None)] }
    }
}

impl fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, descriptor: ToolDescriptor, tool: Arc<dyn Tool>) -> Result<(), AgentError> {
        if self.get(&descriptor.name).is_some() {
            return Err(AgentError::DuplicateTool(descriptor.name));
        }
        self.tools.push((descriptor, Some(tool)));
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.tools.iter().map(|(d, _)| d.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&ToolDescriptor> {
        self.tools.iter().find(|(d, _)| d.name == name).map(|(d, _)| d)
    }

    pub(crate) fn handler(&self, name: &str) -> Option<&Arc<dyn Tool>> {
        self.tools.iter().find(|(d, _)| d.name == name).and_then(|(_, t)| t.as_ref())
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &ToolDescriptor> {
        self.tools.iter().map(|(d, _)| d)
    }

    /// Tool section of the planner prompt.
    pub fn prompt_section(&self) -> String {
        self.descriptors().map(ToolDescriptor::prompt_line).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub tool: String,
    #[serde(default)]
    pub input: Map<String, Value>,
}

/// `{"plan":[{"tool":...,"input":{...}}, ...]}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolPlan {
    pub plan: Vec<PlanStep>,
}

impl ToolPlan {
    pub fn chat() -> Self {
        Self { plan: vec![PlanStep { tool: CHAT_TOOL.into(), input: Map::new() }] }
    }

    pub fn is_chat(&self) -> bool {
        self.plan.len() == 1 && self.plan[0].tool == CHAT_TOOL
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }

    pub fn steps(&self) -> &[PlanStep] {
        &self.plan
    }
}

/// Likes and dislikes the planner tagged for this turn.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEvents {
    #[serde(default)]
    pub liked: Vec<String>,
    #[serde(default)]
    pub disliked: Vec<String>,
}

#[derive(Deserialize)]
struct PlannerReply {
    plan: Vec<PlanStep>,
    #[serde(default)]
    events: Option<PlanEvents>,
}

/// Parses a planner reply. Surrounding prose or code fences are tolerated: the outermost
/// `{ ... }` span is taken as the JSON document.
pub fn parse_plan(reply: &str) -> Result<(ToolPlan, PlanEvents), String> {
    let start = reply.find('{').ok_or("reply contains no JSON object")?;
    let end = reply.rfind('}').ok_or("reply contains no JSON object")?;
    if end < start {
        return Err("reply contains no JSON object".into());
    }
    let parsed: PlannerReply =
        serde_json::from_str(&reply[start..=end]).map_err(|e| format!("invalid plan JSON: {e}"))?;
    Ok((ToolPlan { plan: parsed.plan }, parsed.events.unwrap_or_default()))
}

fn kind_ok(kind: ArgKind, v: &Value) -> bool {
    let is_ids = |v: &Value| v.as_array().is_some_and(|a| a.iter().all(Value::is_string));
    match kind {
        ArgKind::Text => v.is_string(),
        ArgKind::Number => v.as_f64().is_some_and(f64::is_finite),
        ArgKind::PositiveInt => {
            v.as_u64().is_some_and(|n| n >= 1) || v.as_f64().is_some_and(|f| f >= 1.0 && f.fract() == 0.0)
        }
        ArgKind::Ids => is_ids(v),
        ArgKind::Candidates => v.as_str() == Some(BUS) || is_ids(v),
    }
}

/// Returns every violation found; an empty list means the plan may run.
/// `bus_nonempty` says whether the session bus already holds candidates.
pub fn validate_plan(plan: &ToolPlan, registry: &ToolRegistry, bus_nonempty: bool) -> Vec<String> {
    let mut violations = Vec::new();
    if plan.plan.is_empty() {
        violations.push("plan has no steps".to_string());
        return violations;
    }
    let mut bus_filled = bus_nonempty;
    for (i, step) in plan.plan.iter().enumerate() {
        let n = i + 1;
        let Some(desc) = registry.get(&step.tool) else {
            violations.push(format!("unknown tool {} at step {n}", step.tool));
            continue;
        };
        if desc.name == CHAT_TOOL && plan.plan.len() > 1 {
            violations.push(format!("{CHAT_TOOL} must be the only step (step {n})"));
        }
        for spec in &desc.args {
            match step.input.get(&spec.name) {
                None if spec.required => violations.push(format!("missing {} at step {n}", spec.name)),
                None => {}
                Some(v) if !kind_ok(spec.kind, v) => {
                    violations.push(format!("argument {} at step {n} must be {}", spec.name, spec.kind.describe()))
                }
                Some(v) if v.as_str() == Some(BUS) && !bus_filled => violations.push(format!("bus empty at step {n}")),
                Some(_) => {}
            }
        }
        for key in step.input.keys() {
            if !desc.args.iter().any(|a| &a.name == key) {
                violations.push(format!("unexpected argument {key} at step {n}"));
            }
        }
        if desc.produces_candidates {
            bus_filled = true;
        }
    }
    violations
}

/// Resolves `$bus` and converts JSON arguments into typed tool input.
pub(crate) fn resolve_input(step: &PlanStep, desc: &ToolDescriptor, bus: &[String]) -> ToolInput {
    let mut out = BTreeMap::new();
    for spec in &desc.args {
        let Some(v) = step.input.get(&spec.name) else { continue };
        let value = match spec.kind {
            ArgKind::Text => super::tools::ArgValue::Text(v.as_str().unwrap_or_default().to_string()),
            ArgKind::Number | ArgKind::PositiveInt => super::tools::ArgValue::Number(v.as_f64().unwrap_or_default()),
            ArgKind::Ids | ArgKind::Candidates => {
                if v.as_str() == Some(BUS) {
                    super::tools::ArgValue::Ids(bus.to_vec())
                } else {
                    let ids = v.as_array().map(|a| a.iter().filter_map(|x| x.as_str().map(str::to_string)).collect());
                    super::tools::ArgValue::Ids(ids.unwrap_or_default())
                }
            }
        };
        out.insert(spec.name.clone(), value);
    }
    ToolInput(out)
}
