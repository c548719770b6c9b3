//! Chat-completion backends: a scripted mock, an HTTP client, token accounting, streaming.

use std::fmt;
use std::io::{BufRead, BufReader};
use std::sync::atomic::{AtomicU64, Ordering};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bytes per token for the budget heuristic.
pub const BYTES_PER_TOKEN: usize = 4;

/// Placeholder in mock responses replaced by the content of the last tool-role message.
pub const OBSERVATION_PLACEHOLDER: &str = "{{observation}}";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("no script rule matched and no default response")]
    NoScriptMatch,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("remote error {status}: {body}")]
    Remote { status: u16, body: String },
    #[error("bad script: {0}")]
    BadScript(String),
}

pub type Result<T, E = LlmError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Self::new(Role::Tool, content)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub stream: bool,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 1024, stream: false }
    }
}

/// `ceil(utf8_bytes / 4)`.
pub fn count_tokens(text: &str) -> usize {
    text.len().div_ceil(BYTES_PER_TOKEN)
}

/// Sums token counts over message contents.
pub fn count_message_tokens(messages: &[ChatMessage]) -> usize {
    messages.iter().map(|m| count_tokens(&m.content)).sum()
}

fn check_request(messages: &[ChatMessage], params: &CompletionParams) -> Result<()> {
    match messages.last() {
        None => Err(LlmError::InvalidRequest("no messages".into())),
        Some(m) if !matches!(m.role, Role::User | Role::Tool) => {
            Err(LlmError::InvalidRequest(format!("last message has role {}", m.role)))
        }
        _ if params.temperature.is_nan() || params.temperature < 0.0 => {
            Err(LlmError::InvalidRequest("negative temperature".into()))
        }
        _ if params.max_tokens == 0 => Err(LlmError::InvalidRequest("max_tokens must be positive".into())),
        _ => Ok(()),
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<String>;

    /// Delivers the completion as ordered chunks whose concatenation equals [`chat`](Self::chat).
    fn chat_stream(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
        on_chunk: &mut dyn FnMut(&str),
    ) -> Result<()>;

    /// Number of `chat` and `chat_stream` invocations since construction.
    fn call_count(&self) -> u64;
}

/// Collects a stream into its chunks.
pub fn collect_stream(
    backend: &dyn ChatBackend,
    messages: &[ChatMessage],
    params: &CompletionParams,
) -> Result<Vec<String>> {
    let mut chunks = Vec::new();
    backend.chat_stream(messages, params, &mut |c| chunks.push(c.to_string()))?;
    Ok(chunks)
}

/// Splits after every whitespace run that precedes more text: `"a b c"` → `["a ", "b ", "c"]`.
pub fn whitespace_chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws = false;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if prev_ws && !ws && i > start {
            out.push(&text[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

#[derive(Debug, Default)]
struct CallCounter(AtomicU64);

impl CallCounter {
    fn bump(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }

    fn get(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub enum Matcher {
    Contains(String),
    Regex(Regex),
}

impl Matcher {
    fn matches(&self, text: &str) -> bool {
        match self {
            Matcher::Contains(s) => text.contains(s.as_str()),
            Matcher::Regex(r) => r.is_match(text),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockRule {
    pub matcher: Matcher,
    pub response: String,
}

/// Ordered rules over the last user-role message; the first match wins.
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    pub default: Option<String>,
}

#[derive(Deserialize)]
struct RuleFile {
    #[serde(default)]
    contains: Option<String>,
    #[serde(default)]
    regex: Option<String>,
    response: String,
}

#[derive(Deserialize)]
struct ScriptFile {
    #[serde(default)]
    rules: Vec<RuleFile>,
    #[serde(default)]
    default: Option<String>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(mut self, needle: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push(MockRule { matcher: Matcher::Contains(needle.into()), response: response.into() });
        self
    }

    pub fn regex(mut self, pattern: &str, response: impl Into<String>) -> Result<Self> {
        let re = Regex::new(pattern).map_err(|e| LlmError::BadScript(e.to_string()))?;
        self.rules.push(MockRule { matcher: Matcher::Regex(re), response: response.into() });
        Ok(self)
    }

    pub fn with_default(mut self, response: impl Into<String>) -> Self {
        self.default = Some(response.into());
        self
    }

    /// Parses `{"rules":[{"contains"|"regex": ..., "response": ...}], "default": ...}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScriptFile = serde_json::from_str(text).map_err(|e| LlmError::BadScript(e.to_string()))?;
        let mut script = MockScript { rules: Vec::new(), default: file.default };
        for rule in file.rules {
            script = match (rule.contains, rule.regex) {
                (Some(c), None) => script.contains(c, rule.response),
                (None, Some(r)) => script.regex(&r, rule.response)?,
                _ => return Err(LlmError::BadScript("each rule needs exactly one of contains/regex".into())),
            };
        }
        Ok(script)
    }

    fn respond(&self, messages: &[ChatMessage]) -> Result<String> {
        let last_user = messages.iter().rev().find(|m| m.role == Role::User).map_or("", |m| m.content.as_str());
        let template = self
            .rules
            .iter()
            .find(|r| r.matcher.matches(last_user))
            .map(|r| r.response.as_str())
            .or(self.default.as_deref())
            .ok_or(LlmError::NoScriptMatch)?;
        if template.contains(OBSERVATION_PLACEHOLDER) {
            let obs = messages.iter().rev().find(|m| m.role == Role::Tool).map_or("", |m| m.content.as_str());
            Ok(template.replace(OBSERVATION_PLACEHOLDER, obs))
        } else {
            Ok(template.to_string())
        }
    }
}

/// Deterministic scripted backend.
#[derive(Debug, Default)]
pub struct MockBackend {
    script: MockScript,
    calls: CallCounter,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self { script, calls: CallCounter::default() }
    }
}

impl ChatBackend for MockBackend {
    fn chat(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<String> {
        self.calls.bump();
        check_request(messages, params)?;
        self.script.respond(messages)
    }

    fn chat_stream(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
        on_chunk: &mut dyn FnMut(&str),
    ) -> Result<()> {
        self.calls.bump();
        check_request(messages, params)?;
        let text = self.script.respond(messages)?;
        for chunk in whitespace_chunks(&text) {
            on_chunk(chunk);
        }
        Ok(())
    }

    fn call_count(&self) -> u64 {
        self.calls.get()
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    stream: bool,
}

#[derive(Deserialize)]
struct WireReply {
    content: String,
}

#[derive(Deserialize)]
struct WireDelta {
    delta: String,
}

/// Chat backend over HTTP. Non-streamed replies are `{"content": ...}`; streamed replies are
/// server-sent events `data: {"delta": ...}` terminated by `data: [DONE]`.
pub struct HttpBackend {
    url: String,
    api_key: Option<String>,
    retries: u32,
    agent: ureq::Agent,
    calls: CallCounter,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self { url: url.into(), api_key, retries: 1, agent, calls: CallCounter::default() }
    }

    /// Number of retries after a transport failure (default 1).
    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    fn send(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
        stream: bool,
    ) -> Result<ureq::http::Response<ureq::Body>> {
        let body = WireRequest { messages, temperature: params.temperature, max_tokens: params.max_tokens, stream };
        let mut attempt = 0;
        loop {
            let mut req = self.agent.post(&self.url);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(&body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status >= 400 {
                        let body = resp.body_mut().read_to_string().unwrap_or_default();
                        return Err(LlmError::Remote { status, body });
                    }
                    return Ok(resp);
                }
                Err(_) if attempt < self.retries => attempt += 1,
                Err(e) => return Err(LlmError::Transport(e.to_string())),
            }
        }
    }
}

impl ChatBackend for HttpBackend {
    fn chat(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<String> {
        self.calls.bump();
        check_request(messages, params)?;
        let mut resp = self.send(messages, params, false)?;
        let reply: WireReply = resp.body_mut().read_json().map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(reply.content)
    }

    fn chat_stream(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
        on_chunk: &mut dyn FnMut(&str),
    ) -> Result<()> {
        self.calls.bump();
        check_request(messages, params)?;
        let mut resp = self.send(messages, params, true)?;
        let reader = BufReader::new(resp.body_mut().as_reader());
        for line in reader.lines() {
            let line = line.map_err(|e| LlmError::Transport(e.to_string()))?;
            let Some(data) = line.strip_prefix("data:") else { continue };
            let data = data.trim_start();
            if data == "[DONE]" {
                return Ok(());
            }
            let delta: WireDelta =
                serde_json::from_str(data).map_err(|e| LlmError::Transport(format!("bad event: {e}")))?;
            if !delta.delta.is_empty() {
                on_chunk(&delta.delta);
            }
        }
        Err(LlmError::Transport("stream ended before [DONE]".into()))
    }

    fn call_count(&self) -> u64 {
        self.calls.get()
    }
}
