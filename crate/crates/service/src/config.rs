//! TOML service configuration. Relative paths resolve against the config file's directory.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use convrec::agent::AgentConfig;
use convrec::doke::DokeConfig;
use convrec::eval::DEFAULT_FUZZY_THRESHOLD;
use convrec::llm::CompletionParams;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{key}: {path} does not exist")]
    MissingPath { key: &'static str, path: PathBuf },
    #[error("listen address {0:?} is not host:port")]
    BadListen(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("environment variable {0} is not set")]
    MissingEnv(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub catalog: PathBuf,
    pub interactions: PathBuf,
    #[serde(default)]
    pub kg: Option<PathBuf>,
    #[serde(default)]
    pub demos: Option<PathBuf>,
    pub backend: BackendConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub ranker: RankerConfig,
    #[serde(default)]
    pub doke: DokeSection,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub agent: AgentSettings,
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_profile_dir")]
    pub profile_dir: PathBuf,
}

/// Exactly one of `mock_script` (a scripted backend, see `MockScript::from_json`) or `url`.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub mock_script: Option<PathBuf>,
    pub url: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

/// Built-in trigram embedder unless `url` is set.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub url: Option<String>,
    pub api_key_env: Option<String>,
    pub dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { url: None, api_key_env: None, dim: convrec::retrieval::DEFAULT_DIM }
    }
}

/// Co-occurrence ranker unless `url` is set.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankerConfig {
    pub url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct DokeSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub config: DokeConfig,
}

impl Default for DokeSection {
    fn default() -> Self {
        Self { enabled: true, config: DokeConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub fuzzy_threshold: f64,
    pub ks: Vec<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { fuzzy_threshold: DEFAULT_FUZZY_THRESHOLD, ks: vec![1, 5, 10] }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentSettings {
    pub window: usize,
    pub demos: usize,
    pub profile_budget: usize,
    pub knowledge_items: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for AgentSettings {
    fn default() -> Self {
        let a = AgentConfig::default();
        Self {
            window: a.window,
            demos: a.demos,
            profile_budget: a.profile_budget,
            knowledge_items: a.knowledge_items,
            temperature: a.params.temperature,
            max_tokens: a.params.max_tokens,
        }
    }
}

impl AgentSettings {
    pub fn to_agent_config(&self) -> AgentConfig {
        AgentConfig {
            window: self.window,
            demos: self.demos,
            profile_budget: self.profile_budget,
            knowledge_items: self.knowledge_items,
            params: CompletionParams { temperature: self.temperature, max_tokens: self.max_tokens, stream: false },
        }
    }
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_profile_dir() -> PathBuf {
    "profiles".into()
}

fn default_retries() -> u32 {
    1
}

impl ServiceConfig {
    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::parse(&text).map_err(|message| ConfigError::Parse { path: path.into(), message })?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.catalog);
        join(&mut self.interactions);
        join(&mut self.profile_dir);
        for p in [&mut self.kg, &mut self.demos, &mut self.backend.mock_script].into_iter().flatten() {
            join(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut required = vec![("catalog", &self.catalog), ("interactions", &self.interactions)];
        required.extend(self.kg.iter().map(|p| ("kg", p)));
        required.extend(self.demos.iter().map(|p| ("demos", p)));
        required.extend(self.backend.mock_script.iter().map(|p| ("backend.mock_script", p)));
        for (key, path) in required {
            if !path.exists() {
                return Err(ConfigError::MissingPath { key, path: path.clone() });
            }
        }
        self.listen_addr()?;
        match (&self.backend.mock_script, &self.backend.url) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(ConfigError::Backend("set exactly one of mock_script and url".into())),
        }
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.listen.parse().map_err(|_| ConfigError::BadListen(self.listen.clone()))
    }
}

/// Reads the secret named by an `api_key_env` setting.
pub fn api_key(var: Option<&str>) -> Result<Option<String>, ConfigError> {
    match var {
        None => Ok(None),
        Some(name) => std::env::var(name).map(Some).map_err(|_| ConfigError::MissingEnv(name.into())),
    }
}
