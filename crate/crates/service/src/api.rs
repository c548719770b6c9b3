//! HTTP endpoints. Turns run on the blocking pool and stream back as server-sent events.

use std::convert::Infallible;
use std::sync::{Arc, OnceLock};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use convrec::agent::AgentError;
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::mpsc;
use tokio_stream::wrappers::UnboundedReceiverStream;
use tokio_stream::StreamExt;

use crate::runtime::Runtime;

pub const DEFAULT_USER: &str = "anonymous";

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("service is still starting")]
    ServiceUnavailable,
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} already has a turn in flight")]
    BusySession(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::ServiceUnavailable => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ApiError::BusySession(_) => StatusCode::CONFLICT,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Agent(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

/// Shared handle; the runtime is installed once loading finishes.
#[derive(Clone, Default)]
pub struct AppState {
    runtime: Arc<OnceLock<Arc<Runtime>>>,
}

impl AppState {
    pub fn pending() -> Self {
        Self::default()
    }

    pub fn ready(runtime: Arc<Runtime>) -> Self {
        let state = Self::default();
        state.install(runtime);
        state
    }

    /// First install wins; later calls are ignored.
    pub fn install(&self, runtime: Arc<Runtime>) {
        let _ = self.runtime.set(runtime);
    }

    pub fn runtime(&self) -> Result<&Arc<Runtime>, ApiError> {
        self.runtime.get().ok_or(ApiError::ServiceUnavailable)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", axum::routing::delete(close_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/trace", get(get_trace))
        .with_state(state)
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Debug, Default, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub user_id: Option<String>,
}

async fn create_session(
    State(state): State<AppState>,
    body: Option<Json<CreateSession>>,
) -> Result<Response, ApiError> {
    let rt = state.runtime()?;
    let user = body.and_then(|Json(b)| b.user_id).unwrap_or_else(|| DEFAULT_USER.to_string());
    if user.trim().is_empty() {
        return Err(ApiError::BadRequest("user_id must not be empty".into()));
    }
    let session = rt.create_session(&user)?;
    let body = json!({ "session_id": session.id(), "user_id": session.user_id(), "created_ms": session.created_ms() });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn close_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let rt = state.runtime()?;
    if let Some(s) = rt.session(&id) {
        if s.is_busy() {
            return Err(ApiError::BusySession(id));
        }
    }
    if rt.close_session(&id)? {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::UnknownSession(id))
    }
}

#[derive(Debug, Deserialize)]
pub struct PostMessage {
    pub text: String,
}

async fn post_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<PostMessage>,
) -> Result<Response, ApiError> {
    let rt = state.runtime()?.clone();
    let session = rt.session(&id).ok_or_else(|| ApiError::UnknownSession(id.clone()))?;
    if body.text.trim().is_empty() {
        return Err(ApiError::BadRequest("text must not be empty".into()));
    }
    // taken before the stream opens so a second post gets a plain 409
    let permit = session.try_begin().map_err(|_| ApiError::BusySession(id))?;
    let (tx, rx) = mpsc::unbounded_channel::<Value>();
    tokio::task::spawn_blocking(move || {
        let agent = rt.agent();
        let result = agent.run_turn_with(&permit, &body.text, &mut |chunk| {
            let _ = tx.send(json!({ "delta": chunk }));
        });
        let last = match result {
            Ok(turn) => json!({
                "done": true,
                "plan": turn.plan,
                "trace": turn.records,
                "items": turn.observation.and_then(|o| o.items),
            }),
            Err(e) => json!({ "error": e.to_string() }),
        };
        let _ = tx.send(last);
    });
    let events = UnboundedReceiverStream::new(rx).map(|v| Ok::<_, Infallible>(Event::default().data(v.to_string())));
    Ok(Sse::new(events).into_response())
}

async fn get_trace(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let rt = state.runtime()?;
    let session = rt.session(&id).ok_or(ApiError::UnknownSession(id))?;
    Ok(Json(json!({
        "session_id": session.id(),
        "user_id": session.user_id(),
        "busy": session.is_busy(),
        "trace": session.trace(),
        "turns": session.turns(),
    })))
}
