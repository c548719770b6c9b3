//! Plan-first recommender agent: one planner call, tool execution over the Candidate Bus,
//! one response call.

mod demos;
mod memory;
mod plan;
mod tools;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

pub use demos::{select_demonstrations, DemoLibrary, Demonstration};
pub use memory::{
    summarize_profile, CandidateBus, ExecutionRecord, LongTermProfile, ProfileStore, ShortTermMemory, TurnEvents,
    UserProfile,
};
pub use plan::{
    parse_plan, validate_plan, ArgKind, ArgSpec, PlanEvents, PlanStep, ToolDescriptor, ToolPlan, ToolRegistry, BUS,
    CHAT_TOOL,
};
pub use tools::{
    ArgValue, QueryTool, RankTool, RetrieveTool, Tool, ToolContext, ToolError, ToolInput, ToolOutput, Toolkit,
};

use crate::catalog::{Catalog, InteractionStore};
use crate::doke::{augment_prompt, KnowledgePlugin};
use crate::llm::{ChatBackend, ChatMessage, CompletionParams, LlmError};
use crate::ranker::dedup_preserving;
use crate::retrieval::{Embedder, RetrievalError};
use memory::now_ms;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("plan could not be parsed: {0}")]
    PlanParse(String),
    #[error("plan failed validation: {}", .0.join("; "))]
    PlanValidation(Vec<String>),
    #[error("step {step} failed: {cause}")]
    ToolExecution { step: usize, cause: ToolError },
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("session {0} already has a turn in flight")]
    BusySession(String),
    #[error("tool {0} is already registered")]
    DuplicateTool(String),
    #[error("demonstration line {line}: {reason}")]
    BadDemo { line: usize, reason: String },
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

const PLANNER_PREAMBLE: &str = "You are the planner of a conversational recommender system. \
Read the user's request and reply with one JSON object holding the complete tool-execution plan \
for this turn. The plan runs step by step without further input from you, and the last step's \
output is shown to the responder.";

const PLAN_FORMAT: &str = r#"Format: {"plan":[{"tool":<name>,"input":{<argument>:<value>}}]}
Use "$bus" as candidates to work on the items produced by the previous step or an earlier turn.
For small talk reply {"plan":[{"tool":"chat","input":{}}]}.
If the user states that they like or dislike specific items, add "events":{"liked":[<ids>],"disliked":[<ids>]}."#;

const RESPONDER_PREAMBLE: &str = "You are a friendly conversational recommender. Answer the user's \
last message. When a tool observation is given, base recommendations on it and mention items by \
their exact titles.";

pub const REPAIR_PREFIX: &str = "Your previous plan was invalid:";

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    /// Dialogue messages carried verbatim into prompts.
    pub window: usize,
    /// Demonstrations per planner prompt.
    pub demos: usize,
    pub profile_budget: usize,
    /// Candidates from the final observation passed to the knowledge plugin.
    pub knowledge_items: usize,
    pub params: CompletionParams,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { window: 10, demos: 3, profile_budget: 100, knowledge_items: 5, params: CompletionParams::default() }
    }
}

/// Final step output handed to the responder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observation {
    pub text: String,
    pub items: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub plan: ToolPlan,
    pub events: PlanEvents,
    /// Planner prompt as issued, rendered as `[role]\ncontent` blocks.
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlannedTurn {
    pub seq: u64,
    pub instruction: String,
    pub plan: ToolPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutcome {
    pub plan: ToolPlan,
    /// Records appended to the bus trace during this turn.
    pub records: Vec<ExecutionRecord>,
    pub observation: Option<Observation>,
    pub reply: String,
}

static PLAN_SEQ: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Default)]
struct SessionState {
    turns: Vec<ChatMessage>,
    short_term: ShortTermMemory,
    current: Vec<String>,
    planned: Vec<PlannedTurn>,
    turn_no: usize,
}

/// Dialogue, short-term memory and Candidate Bus of one conversation.
#[derive(Debug)]
pub struct Session {
    id: String,
    user_id: String,
    created_ms: u64,
    long_term: Arc<RwLock<LongTermProfile>>,
    state: Mutex<SessionState>,
    // separate lock so readers see records while a turn is running
    trace: Mutex<Vec<ExecutionRecord>>,
    busy: AtomicBool,
}

/// Held for the duration of a turn; dropping it frees the session.
#[derive(Debug)]
pub struct TurnPermit {
    session: Arc<Session>,
}

impl TurnPermit {
    pub fn session(&self) -> &Arc<Session> {
        &self.session
    }
}

impl Drop for TurnPermit {
    fn drop(&mut self) {
        self.session.busy.store(false, Ordering::SeqCst);
    }
}

impl Session {
    pub fn new(id: impl Into<String>, user_id: impl Into<String>, long_term: Arc<RwLock<LongTermProfile>>) -> Self {
        Self {
            id: id.into(),
            user_id: user_id.into(),
            created_ms: now_ms(),
            long_term,
            state: Mutex::default(),
            trace: Mutex::default(),
            busy: AtomicBool::new(false),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn created_ms(&self) -> u64 {
        self.created_ms
    }

    fn state(&self) -> MutexGuard<'_, SessionState> {
        self.state.lock().expect("session state poisoned")
    }

    pub fn try_begin(self: &Arc<Self>) -> Result<TurnPermit> {
        if self.busy.swap(true, Ordering::SeqCst) {
            return Err(AgentError::BusySession(self.id.clone()));
        }
        Ok(TurnPermit { session: self.clone() })
    }

    pub fn is_busy(&self) -> bool {
        self.busy.load(Ordering::SeqCst)
    }

    pub fn turns(&self) -> Vec<ChatMessage> {
        self.state().turns.clone()
    }

    pub fn trace(&self) -> Vec<ExecutionRecord> {
        self.trace.lock().expect("trace poisoned").clone()
    }

    pub fn bus(&self) -> CandidateBus {
        CandidateBus { current: self.state().current.clone(), trace: self.trace() }
    }

    pub fn profile(&self) -> UserProfile {
        UserProfile {
            long_term: self.long_term.read().expect("profile poisoned").clone(),
            short_term: self.state().short_term.clone(),
        }
    }

    pub fn planned_turns(&self) -> Vec<PlannedTurn> {
        self.state().planned.clone()
    }

    /// Drops dialogue, short-term memory and the bus. Long-term memory is untouched.
    pub fn clear(&self) {
        *self.state() = SessionState::default();
        self.trace.lock().expect("trace poisoned").clear();
    }

    fn push_record(&self, record: ExecutionRecord) {
        self.trace.lock().expect("trace poisoned").push(record);
    }
}

fn render_instruction(messages: &[ChatMessage]) -> String {
    messages.iter().map(|m| format!("[{}]\n{}", m.role, m.content)).collect::<Vec<_>>().join("\n\n")
}

fn summarize_output(out: &ToolOutput) -> String {
    match &out.items {
        Some(ids) => format!("{} items: {}", ids.len(), ids.join(", ")),
        None => {
            let line = out.text.lines().next().unwrap_or_default();
            line.chars().take(200).collect()
        }
    }
}

/// JSON lines of `{"instruction":...,"plan":{...}}` for every planned turn, oldest first.
pub fn export_plan_dataset(sessions: &[Arc<Session>]) -> Vec<u8> {
    let mut turns: Vec<PlannedTurn> = sessions.iter().flat_map(|s| s.planned_turns()).collect();
    turns.sort_by_key(|t| t.seq);
    let mut out = Vec::new();
    for t in turns {
        let line = json!({ "instruction": t.instruction, "plan": t.plan });
        out.extend_from_slice(line.to_string().as_bytes());
        out.push(b'\n');
    }
    out
}

pub struct Agent {
    catalog: Arc<Catalog>,
    interactions: Arc<InteractionStore>,
    registry: ToolRegistry,
    backend: Arc<dyn ChatBackend>,
    embedder: Arc<dyn Embedder>,
    demos: DemoLibrary,
    knowledge: Option<KnowledgePlugin>,
    profiles: Arc<ProfileStore>,
    config: AgentConfig,
}

impl Agent {
    /// Agent with no demonstrations, no knowledge plugin and an in-memory profile store.
    pub fn new(
        catalog: Arc<Catalog>,
        interactions: Arc<InteractionStore>,
        registry: ToolRegistry,
        backend: Arc<dyn ChatBackend>,
        embedder: Arc<dyn Embedder>,
    ) -> Self {
        Self {
            catalog,
            interactions,
            registry,
            backend,
            embedder,
            demos: DemoLibrary::default(),
            knowledge: None,
            profiles: Arc::new(ProfileStore::in_memory()),
            config: AgentConfig::default(),
        }
    }

    pub fn with_demos(mut self, demos: DemoLibrary) -> Self {
        self.demos = demos;
        self
    }

    pub fn with_knowledge(mut self, plugin: KnowledgePlugin) -> Self {
        self.knowledge = Some(plugin);
        self
    }

    pub fn with_profiles(mut self, store: Arc<ProfileStore>) -> Self {
        self.profiles = store;
        self
    }

    pub fn with_config(mut self, config: AgentConfig) -> Self {
        self.config = config;
        self
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn registry(&self) -> &ToolRegistry {
        &self.registry
    }

    pub fn backend(&self) -> &Arc<dyn ChatBackend> {
        &self.backend
    }

    pub fn profiles(&self) -> &Arc<ProfileStore> {
        &self.profiles
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    /// Fresh session with a random id; the user's long-term profile is loaded if stored.
    pub fn open_session(&self, user_id: &str) -> Result<Arc<Session>> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        Ok(Arc::new(Session::new(id, user_id, self.profiles.profile(user_id)?)))
    }

    /// Persists the user's long-term profile.
    pub fn close_session(&self, session: &Session) -> Result<()> {
        self.profiles.flush(session.user_id())
    }

    fn window(&self, session: &Session) -> Vec<ChatMessage> {
        let turns = &session.state().turns;
        turns[turns.len().saturating_sub(self.config.window)..].to_vec()
    }

    /// Interaction history plus liked items of both tiers, minus disliked ones.
    pub fn rank_history(&self, session: &Session) -> Vec<String> {
        let profile = session.profile();
        let mut ids = self.interactions.history_ids(session.user_id());
        ids.extend(profile.long_term.ranked_likes().into_iter().map(|(id, _)| id.to_string()));
        ids.extend(profile.short_term.liked.iter().cloned());
        ids.retain(|id| !profile.long_term.disliked.contains(id) && !profile.short_term.disliked.contains(id));
        dedup_preserving(&ids)
    }

    fn planner_prompt(&self, session: &Session, text: &str) -> Result<Vec<ChatMessage>> {
        let mut system = format!("{PLANNER_PREAMBLE}\n\nTools:\n{}\n\n{PLAN_FORMAT}", self.registry.prompt_section());
        if !self.demos.is_empty() && self.config.demos > 0 {
            system.push_str("\n\nExamples:");
            for d in select_demonstrations(&self.demos, self.embedder.as_ref(), text, self.config.demos)? {
                system.push_str(&format!("\nRequest: {}\nPlan: {}", d.intent, d.plan.to_json()));
            }
        }
        let summary = summarize_profile(&session.profile(), self.config.profile_budget);
        if !summary.is_empty() {
            system.push_str(&format!("\n\nUser profile:\n{summary}"));
        }
        let mut messages = vec![ChatMessage::system(system)];
        messages.extend(self.window(session));
        messages.push(ChatMessage::user(format!("Request: {text}\nReply with the plan JSON only.")));
        Ok(messages)
    }

    fn check_reply(&self, reply: &str, bus_nonempty: bool) -> Result<(ToolPlan, PlanEvents)> {
        let (plan, events) = parse_plan(reply).map_err(AgentError::PlanParse)?;
        let violations = validate_plan(&plan, &self.registry, bus_nonempty);
        if violations.is_empty() {
            Ok((plan, events))
        } else {
            Err(AgentError::PlanValidation(violations))
        }
    }

    /// One planner call, plus at most one repair call if the reply does not parse or validate.
    pub fn make_plan(&self, session: &Session, text: &str) -> Result<PlanOutcome> {
        let messages = self.planner_prompt(session, text)?;
        let instruction = render_instruction(&messages);
        let bus_nonempty = !session.state().current.is_empty();
        let reply = self.backend.chat(&messages, &self.config.params)?;
        let (plan, events) = match self.check_reply(&reply, bus_nonempty) {
            Ok(ok) => ok,
            Err(first) => {
                let mut repair = messages.clone();
                repair.push(ChatMessage::assistant(reply));
                repair.push(ChatMessage::user(format!(
                    "{REPAIR_PREFIX} {first}\nReply with the corrected plan JSON only."
                )));
                let reply = self.backend.chat(&repair, &self.config.params)?;
                self.check_reply(&reply, bus_nonempty)?
            }
        };
        session.state().planned.push(PlannedTurn {
            seq: PLAN_SEQ.fetch_add(1, Ordering::SeqCst),
            instruction: instruction.clone(),
            plan: plan.clone(),
        });
        Ok(PlanOutcome { plan, events, instruction })
    }

    /// Runs a validated plan in order. Each step appends one trace record, failed steps included.
    pub fn execute_plan(&self, session: &Session, plan: &ToolPlan) -> Result<Observation> {
        let turn = session.state().turn_no;
        let history = self.rank_history(session);
        let summary = summarize_profile(&session.profile(), self.config.profile_budget);
        let ctx = ToolContext { catalog: &self.catalog, history: &history, profile_summary: &summary };
        let mut last = Observation { text: String::new(), items: None };
        for (i, step) in plan.steps().iter().enumerate() {
            let n = i + 1;
            let (Some(desc), Some(tool)) = (self.registry.get(&step.tool), self.registry.handler(&step.tool)) else {
                let cause = ToolError::Invalid(format!("tool {} has no handler", step.tool));
                return Err(AgentError::ToolExecution { step: n, cause });
            };
            let current = session.state().current.clone();
            let input = plan::resolve_input(step, desc, &current);
            let started_ms = now_ms();
            let result = tool.run(&input, &ctx);
            let mut record = ExecutionRecord {
                turn,
                step: n,
                tool: step.tool.clone(),
                input_summary: input.summary(),
                output_summary: String::new(),
                started_ms,
                ended_ms: now_ms(),
                error: None,
            };
            match result {
                Ok(out) => {
                    record.output_summary = summarize_output(&out);
                    if let Some(items) = &out.items {
                        session.state().current = items.clone();
                    }
                    session.push_record(record);
                    last = Observation { text: out.text, items: out.items };
                }
                Err(cause) => {
                    record.error = Some(cause.to_string());
                    session.push_record(record);
                    return Err(AgentError::ToolExecution { step: n, cause });
                }
            }
        }
        Ok(last)
    }

    fn resolve_ref(&self, r: &str) -> Option<String> {
        if self.catalog.contains(r) {
            Some(r.to_string())
        } else {
            self.catalog.find_by_title(r).map(str::to_string)
        }
    }

    /// Applies one turn's events to both memory tiers; later signals win.
    pub fn update_profile(&self, session: &Session, events: &TurnEvents) -> Result<UserProfile> {
        if let Some(bad) = events.liked.iter().chain(&events.disliked).find(|id| !self.catalog.contains(id)) {
            return Err(AgentError::UnknownItem(bad.clone()));
        }
        {
            let mut lt = session.long_term.write().expect("profile poisoned");
            let mut state = session.state();
            state.short_term.intent = events.intent.clone();
            for id in &events.liked {
                state.short_term.like(id);
                lt.like(id);
            }
            for id in &events.disliked {
                state.short_term.dislike(id);
                lt.dislike(id);
            }
        }
        Ok(session.profile())
    }

    /// One streamed backend call over the dialogue window, the user message and the observation.
    pub fn respond(
        &self,
        session: &Session,
        text: &str,
        observation: Option<&Observation>,
        on_chunk: &mut dyn FnMut(&str),
    ) -> Result<String> {
        let mut messages = vec![ChatMessage::system(RESPONDER_PREAMBLE)];
        messages.extend(self.window(session));
        messages.push(ChatMessage::user(text));
        if let Some(obs) = observation {
            messages.push(ChatMessage::tool(obs.text.clone()));
        }
        if let (Some(plugin), Some(items)) = (&self.knowledge, observation.and_then(|o| o.items.as_ref())) {
            let candidates: Vec<String> = items.iter().take(self.config.knowledge_items).cloned().collect();
            let knowledge = plugin.knowledge_text(&self.rank_history(session), &candidates);
            messages = augment_prompt(&messages, &knowledge);
        }
        let mut reply = String::new();
        self.backend.chat_stream(&messages, &self.config.params, &mut |chunk| {
            reply.push_str(chunk);
            on_chunk(chunk);
        })?;
        let mut state = session.state();
        state.turns.push(ChatMessage::user(text));
        state.turns.push(ChatMessage::assistant(reply.clone()));
        Ok(reply)
    }

    /// plan → execute → respond, holding the session for the whole turn.
    pub fn run_turn(&self, session: &Arc<Session>, text: &str, on_chunk: &mut dyn FnMut(&str)) -> Result<TurnOutcome> {
        let permit = session.try_begin()?;
        self.run_turn_with(&permit, text, on_chunk)
    }

    /// Like [`Agent::run_turn`] for a caller that already holds the session.
    pub fn run_turn_with(
        &self,
        permit: &TurnPermit,
        text: &str,
        on_chunk: &mut dyn FnMut(&str),
    ) -> Result<TurnOutcome> {
        let session = &permit.session;
        let trace_start = session.trace().len();
        session.state().turn_no += 1;
        let planned = self.make_plan(session, text)?;
        let resolve = |ids: &[String]| ids.iter().filter_map(|r| self.resolve_ref(r)).collect::<Vec<_>>();
        let events = TurnEvents {
            liked: resolve(&planned.events.liked),
            disliked: resolve(&planned.events.disliked),
            intent: text.to_string(),
        };
        self.update_profile(session, &events)?;
        let observation = if planned.plan.is_chat() { None } else { Some(self.execute_plan(session, &planned.plan)?) };
        let reply = self.respond(session, text, observation.as_ref(), on_chunk)?;
        let records = session.trace()[trace_start..].to_vec();
        Ok(TurnOutcome { plan: planned.plan, records, observation, reply })
    }
}

/// A session driven turn by turn, for the conversation evaluator.
pub struct AgentConversation {
    pub agent: Arc<Agent>,
    pub session: Arc<Session>,
}

impl AgentConversation {
    pub fn open(agent: Arc<Agent>, user_id: &str) -> Result<Self> {
        let session = agent.open_session(user_id)?;
        Ok(Self { agent, session })
    }
}

impl crate::eval::Conversation for AgentConversation {
    fn reply(&mut self, utterance: &str) -> std::result::Result<String, String> {
        self.agent.run_turn(&self.session, utterance, &mut |_| {}).map(|t| t.reply).map_err(|e| e.to_string())
    }
}
