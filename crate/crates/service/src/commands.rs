//! Command implementations shared by the binary and the tests.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use clap::ValueEnum;
use convrec::agent::{export_plan_dataset, Agent, AgentConversation, Session};
use convrec::eval::{
    eval_conversation, eval_embedding, eval_generative, eval_judged, Conversation, EmbeddingCase, EvalReport,
    GenEvalCase, JudgedCase, Rubric, SimulatorScript,
};
use convrec::retrieval::ItemIndex;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;

use crate::api::{router, AppState};
use crate::config::ServiceConfig;
use crate::runtime::{build_backend, build_embedder, load_data, Runtime};

/// Any command failure, rendered as a one-line message.
#[derive(Debug)]
pub struct CommandError(pub String);

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CommandError {}

fn fail(e: impl std::fmt::Display) -> CommandError {
    CommandError(e.to_string())
}

pub type Result<T> = std::result::Result<T, CommandError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dimension {
    Generative,
    Embedding,
    Conversation,
    Explanation,
    Chitchat,
}

/// JSON lines into `T`, skipping blank lines; errors name the offending line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| fail(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| fail(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(value);
    }
    Ok(out)
}

pub fn run_eval(cfg: &ServiceConfig, dimension: Dimension, cases: &Path) -> Result<EvalReport> {
    let threshold = cfg.eval.fuzzy_threshold;
    match dimension {
        Dimension::Generative => {
            let cases: Vec<GenEvalCase> = read_jsonl(cases)?;
            let data = load_data(cfg).map_err(fail)?;
            eval_generative(&cases, &data.catalog, &cfg.eval.ks, threshold).map_err(fail)
        }
        Dimension::Embedding => {
            let cases: Vec<EmbeddingCase> = read_jsonl(cases)?;
            let data = load_data(cfg).map_err(fail)?;
            let embedder = build_embedder(cfg).map_err(fail)?;
            eval_embedding(embedder.as_ref(), &data.catalog, &cases, &cfg.eval.ks).map_err(fail)
        }
        Dimension::Conversation => {
            let scripts: Vec<SimulatorScript> = read_jsonl(cases)?;
            if scripts.is_empty() {
                return Ok(EvalReport::default());
            }
            let rt = Runtime::from_config(cfg).map_err(fail)?;
            let agent = rt.agent().clone();
            let catalog = agent.catalog().clone();
            eval_conversation(&scripts, &catalog, threshold, |script| {
                let user = script.user_id.clone().unwrap_or_else(|| "simulator".into());
                match AgentConversation::open(agent.clone(), &user) {
                    Ok(c) => Box::new(c) as Box<dyn Conversation>,
                    // counted as a failed case by the evaluator
                    Err(e) => Box::new(Broken(e.to_string())),
                }
            })
            .map_err(fail)
        }
        Dimension::Explanation | Dimension::Chitchat => {
            let cases: Vec<JudgedCase> = read_jsonl(cases)?;
            let rubric = if dimension == Dimension::Explanation { Rubric::Explanation } else { Rubric::Chitchat };
            let judge = build_backend(cfg).map_err(fail)?;
            Ok(eval_judged(judge.as_ref(), &cases, rubric))
        }
    }
}

struct Broken(String);

impl Conversation for Broken {
    fn reply(&mut self, _: &str) -> std::result::Result<String, String> {
        Err(self.0.clone())
    }
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(fail)?;
    std::fs::write(path, text + "\n").map_err(|e| fail(format!("{}: {e}", path.display())))
}

/// Loads every input and reports sizes; fails on the first malformed record.
pub fn ingest(cfg: &ServiceConfig, out: &mut dyn Write) -> Result<()> {
    let data = load_data(cfg).map_err(fail)?;
    writeln!(out, "items: {}", data.catalog.len()).map_err(fail)?;
    writeln!(out, "interactions: {} ({} dropped)", data.interactions.len(), data.interactions.dropped())
        .map_err(fail)?;
    writeln!(out, "users: {}", data.interactions.users().count()).map_err(fail)?;
    if let Some(kg) = &data.kg {
        writeln!(out, "kg triples: {}", kg.len()).map_err(fail)?;
    }
    if cfg.demos.is_some() {
        // demonstrations are validated against the tool registry, which needs the full agent
        Runtime::from_config(cfg).map_err(fail)?;
        writeln!(out, "demonstrations: ok").map_err(fail)?;
    }
    Ok(())
}

/// Builds the embedding index; with `out`, also writes it as `{"id","vector"}` lines.
pub fn index(cfg: &ServiceConfig, out_path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let data = load_data(cfg).map_err(fail)?;
    let embedder = build_embedder(cfg).map_err(fail)?;
    let index = ItemIndex::build(&data.catalog, embedder.as_ref()).map_err(fail)?;
    writeln!(out, "indexed {} items with {}", index.len(), embedder.descriptor()).map_err(fail)?;
    if let Some(path) = out_path {
        let mut f = std::io::BufWriter::new(File::create(path).map_err(|e| fail(format!("{}: {e}", path.display())))?);
        for (id, v) in index.entries() {
            writeln!(f, "{}", json!({ "id": id, "vector": v.values() })).map_err(fail)?;
        }
        f.flush().map_err(fail)?;
    }
    Ok(())
}

/// One scripted dialogue for `export-plans`.
#[derive(Debug, Clone, Deserialize)]
pub struct Dialogue {
    #[serde(default = "anonymous")]
    pub user_id: String,
    pub utterances: Vec<String>,
}

fn anonymous() -> String {
    crate::api::DEFAULT_USER.into()
}

/// Replays dialogues through the agent and writes the planned turns as training pairs.
/// Turns that fail are skipped; the count is returned.
pub fn export_plans(agent: &Agent, dialogues: &[Dialogue], out_path: &Path) -> Result<usize> {
    let mut sessions: Vec<Arc<Session>> = Vec::new();
    let mut failed = 0;
    for d in dialogues {
        let session = agent.open_session(&d.user_id).map_err(fail)?;
        for u in &d.utterances {
            if agent.run_turn(&session, u, &mut |_| {}).is_err() {
                failed += 1;
            }
        }
        agent.close_session(&session).map_err(fail)?;
        sessions.push(session);
    }
    std::fs::write(out_path, export_plan_dataset(&sessions))
        .map_err(|e| fail(format!("{}: {e}", out_path.display())))?;
    Ok(failed)
}

/// Terminal REPL over one local session. `/trace` prints the bus trace, `/quit` leaves.
pub fn chat(agent: &Agent, user: &str, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let session = agent.open_session(user).map_err(fail)?;
    loop {
        write!(out, "> ").map_err(fail)?;
        out.flush().map_err(fail)?;
        let mut line = String::new();
        if input.read_line(&mut line).map_err(fail)? == 0 {
            break;
        }
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" => break,
            "/trace" => {
                for r in session.trace() {
                    writeln!(out, "{} #{} {} {} -> {}", r.turn, r.step, r.tool, r.input_summary, r.output_summary)
                        .map_err(fail)?;
                }
                continue;
            }
            _ => {}
        }
        let mut sink_err = None;
        let result = agent.run_turn(&session, text, &mut |chunk| {
            if let Err(e) = out.write_all(chunk.as_bytes()).and_then(|_| out.flush()) {
                sink_err.get_or_insert(e);
            }
        });
        if let Some(e) = sink_err {
            return Err(fail(e));
        }
        match result {
            Ok(_) => writeln!(out).map_err(fail)?,
            Err(e) => writeln!(out, "error: {e}").map_err(fail)?,
        }
    }
    agent.close_session(&session).map_err(fail)
}

/// Binds first, then loads; requests arriving before loading completes get 503.
pub async fn serve(cfg: ServiceConfig) -> Result<()> {
    let addr = cfg.listen_addr().map_err(fail)?;
    let listener = TcpListener::bind(addr).await.map_err(|e| fail(format!("bind {addr}: {e}")))?;
    tracing::info!("listening on {}", listener.local_addr().map_err(fail)?);
    let state = AppState::pending();
    let loader = {
        let state = state.clone();
        tokio::task::spawn_blocking(move || -> Result<Arc<Runtime>> {
            let rt = Arc::new(Runtime::from_config(&cfg).map_err(fail)?);
            state.install(rt.clone());
            tracing::info!("agent ready with {} items", rt.agent().catalog().len());
            Ok(rt)
        })
    };
    axum::serve(listener, router(state.clone())).with_graceful_shutdown(shutdown_signal()).await.map_err(fail)?;
    let rt = match state.runtime() {
        Ok(rt) => rt.clone(),
        Err(_) => loader.await.map_err(fail)??,
    };
    rt.shutdown().map_err(fail)?;
    tracing::info!("profiles flushed");
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
