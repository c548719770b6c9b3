//! Loading data and models from a config, and the live session table.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::{Arc, RwLock};

use convrec::agent::{Agent, AgentError, DemoLibrary, ProfileStore, Session, Toolkit};
use convrec::catalog::{load_catalog, load_interactions, Catalog, InteractionStore};
use convrec::doke::{KnowledgeGraph, KnowledgePlugin};
use convrec::llm::{ChatBackend, HttpBackend, MockBackend, MockScript};
use convrec::ranker::{CoocModel, HttpRanker, Ranker};
use convrec::retrieval::{Embedder, HttpEmbedder, ItemIndex, TrigramEmbedder};
use thiserror::Error;

use crate::config::{api_key, ConfigError, ServiceConfig};

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {message}")]
    Load { path: String, message: String },
    #[error(transparent)]
    Agent(#[from] AgentError),
}

fn open(path: &Path) -> Result<BufReader<File>, StartupError> {
    File::open(path).map(BufReader::new).map_err(|e| load_err(path, e))
}

fn load_err(path: &Path, e: impl std::fmt::Display) -> StartupError {
    StartupError::Load { path: path.display().to_string(), message: e.to_string() }
}

/// Catalog (with popularity), interactions and the optional knowledge graph.
pub struct Data {
    pub catalog: Arc<Catalog>,
    pub interactions: Arc<InteractionStore>,
    pub kg: Option<Arc<KnowledgeGraph>>,
}

pub fn load_data(cfg: &ServiceConfig) -> Result<Data, StartupError> {
    let base = load_catalog(open(&cfg.catalog)?).map_err(|e| load_err(&cfg.catalog, e))?;
    let interactions =
        load_interactions(open(&cfg.interactions)?, &base).map_err(|e| load_err(&cfg.interactions, e))?;
    let kg = match &cfg.kg {
        Some(p) => Some(Arc::new(KnowledgeGraph::load(open(p)?).map_err(|e| load_err(p, e))?)),
        None => None,
    };
    let catalog = Arc::new(base.with_popularity(&interactions));
    Ok(Data { catalog, interactions: Arc::new(interactions), kg })
}

pub fn build_embedder(cfg: &ServiceConfig) -> Result<Arc<dyn Embedder>, StartupError> {
    Ok(match &cfg.embedder.url {
        Some(url) => Arc::new(HttpEmbedder::new(url.clone(), api_key(cfg.embedder.api_key_env.as_deref())?)),
        None => Arc::new(TrigramEmbedder::new(cfg.embedder.dim)),
    })
}

pub fn build_backend(cfg: &ServiceConfig) -> Result<Arc<dyn ChatBackend>, StartupError> {
    let b = &cfg.backend;
    match (&b.mock_script, &b.url) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path).map_err(|e| load_err(path, e))?;
            let script = MockScript::from_json(&text).map_err(|e| load_err(path, e))?;
            Ok(Arc::new(MockBackend::new(script)))
        }
        (None, Some(url)) => {
            let key = api_key(b.api_key_env.as_deref())?;
            Ok(Arc::new(HttpBackend::new(url.clone(), key).with_retries(b.retries)))
        }
        _ => Err(ConfigError::Backend("set exactly one of mock_script and url".into()).into()),
    }
}

/// Full agent: tools over the catalog, demonstrations, knowledge plugin and profile store.
pub fn build_agent(cfg: &ServiceConfig) -> Result<Agent, StartupError> {
    let data = load_data(cfg)?;
    let embedder = build_embedder(cfg)?;
    let index = Arc::new(ItemIndex::build(&data.catalog, embedder.as_ref()).map_err(AgentError::from)?);
    let model = Arc::new(CoocModel::fit(&data.interactions));
    let ranker: Arc<dyn Ranker> = match &cfg.ranker.url {
        Some(url) => Arc::new(HttpRanker::new(url.clone())),
        None => model.clone(),
    };
    let toolkit = Toolkit { catalog: data.catalog.clone(), index, embedder: embedder.clone(), ranker };
    let registry = toolkit.registry()?;
    let demos = match &cfg.demos {
        Some(p) => DemoLibrary::load(open(p)?, &registry)?,
        None => DemoLibrary::default(),
    };
    let profiles = Arc::new(ProfileStore::open(&cfg.profile_dir)?);
    let mut agent = Agent::new(data.catalog.clone(), data.interactions, registry, build_backend(cfg)?, embedder)
        .with_demos(demos)
        .with_profiles(profiles)
        .with_config(cfg.agent.to_agent_config());
    if cfg.doke.enabled {
        agent = agent.with_knowledge(KnowledgePlugin::new(cfg.doke.config.clone(), data.catalog, model, data.kg));
    }
    Ok(agent)
}

/// An agent plus the sessions opened on it.
pub struct Runtime {
    agent: Arc<Agent>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
}

impl Runtime {
    pub fn new(agent: Arc<Agent>) -> Self {
        Self { agent, sessions: RwLock::default() }
    }

    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, StartupError> {
        Ok(Self::new(Arc::new(build_agent(cfg)?)))
    }

    pub fn agent(&self) -> &Arc<Agent> {
        &self.agent
    }

    pub fn create_session(&self, user_id: &str) -> Result<Arc<Session>, AgentError> {
        let session = self.agent.open_session(user_id)?;
        self.sessions.write().expect("session table poisoned").insert(session.id().to_string(), session.clone());
        Ok(session)
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.read().expect("session table poisoned").get(id).cloned()
    }

    /// Removes the session and flushes its user's long-term profile.
    pub fn close_session(&self, id: &str) -> Result<bool, AgentError> {
        let removed = self.sessions.write().expect("session table poisoned").remove(id);
        match removed {
            Some(s) => self.agent.close_session(&s).map(|_| true),
            None => Ok(false),
        }
    }

    /// Open sessions, oldest first.
    pub fn sessions(&self) -> Vec<Arc<Session>> {
        let mut all: Vec<Arc<Session>> =
            self.sessions.read().expect("session table poisoned").values().cloned().collect();
        all.sort_by(|a, b| a.created_ms().cmp(&b.created_ms()).then_with(|| a.id().cmp(b.id())));
        all
    }

    /// Flushes every long-term profile touched since startup.
    pub fn shutdown(&self) -> Result<(), AgentError> {
        self.agent.profiles().flush_all()
    }
}
