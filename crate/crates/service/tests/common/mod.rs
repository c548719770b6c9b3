//! On-disk fixture and request helpers shared by the service suites.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use convrec_service::api::{router, AppState};
use convrec_service::config::ServiceConfig;
use convrec_service::runtime::Runtime;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

pub const GAMES: &str = r#"{"schema":[{"name":"genre","kind":"text"},{"name":"price","kind":"number"},{"name":"tags","kind":"text-list"}]}
{"id":"g1","title":"Eldervale","description":"A hand-painted fantasy RPG","attributes":{"genre":"RPG","price":15,"tags":["fantasy"]}}
{"id":"g2","title":"Witcher-like Quest","description":"Open-world monster hunting RPG","attributes":{"genre":"RPG","price":30,"tags":["open-world"]}}
{"id":"g3","title":"Stardew Valley","description":"Cozy farming life sim","attributes":{"genre":"farming","price":14.99,"tags":["coop","cozy"]}}
{"id":"g4","title":"Boom Arena","description":"Arena shooter","attributes":{"genre":"shooter","price":20,"tags":["pvp"]}}
{"id":"g5","title":"Boom Arena 2","description":"Co-op arena sequel","attributes":{"genre":"co-op","price":25,"tags":["coop"]}}
"#;

pub const INTERACTIONS: &str =
    "u1\tg1\t1\nu1\tg3\t2\nu2\tg1\t1\nu2\tg2\t2\nu2\tg3\t3\nu3\tg4\t1\nu3\tg5\t2\nu4\tg2\t1\nu4\tg5\t2\n";

pub const KG: &str = "g1\tgenre\tRPG\ng2\tgenre\tRPG\ng3\ttag\tcozy\n";

/// Planner rules first (they see `Request: ...`), then responder rules on the raw text.
pub fn script() -> Value {
    let rpg = r#"{"plan":[{"tool":"retrieve","input":{"hard":"genre = 'RPG' AND price < 20","k":3}},{"tool":"rank","input":{"candidates":"$bus"}}]}"#;
    let cozy = r#"{"plan":[{"tool":"retrieve","input":{"soft":"cozy farming","k":2}},{"tool":"rank","input":{"candidates":"$bus","k":1}}]}"#;
    let cheap = r#"{"plan":[{"tool":"query","input":{"filter":"price < 20"}}]}"#;
    let love = r#"{"plan":[{"tool":"chat","input":{}}],"events":{"liked":["Eldervale"]}}"#;
    json!({
        "rules": [
            {"regex": "^Request: .*boom", "response": "this is not a plan"},
            {"regex": "^Request: .*RPG", "response": rpg},
            {"regex": "^Request: .*cozy", "response": cozy},
            {"regex": "^Request: .*cheap", "response": cheap},
            {"regex": "^Request: .*love Eldervale", "response": love},
            {"regex": "^Request: ", "response": r#"{"plan":[{"tool":"chat","input":{}}]}"#},
            {"contains": "Your previous plan was invalid", "response": "still not a plan"},
            {"contains": "RPG", "response": "Here is what fits: {{observation}}"},
            {"contains": "cozy", "response": "Try this one: {{observation}}"},
            {"contains": "cheap", "response": "Cheap picks: {{observation}}"}
        ],
        "default": "Glad to chat. What do you feel like playing?"
    })
}

pub struct Fixture {
    pub dir: TempDir,
    pub config_path: PathBuf,
}

impl Fixture {
    pub fn new() -> Self {
        Self::with_config("")
    }

    /// Fixture files plus a config; `extra` is appended to the generated TOML.
    pub fn with_config(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        std::fs::write(p.join("games.jsonl"), GAMES).unwrap();
        std::fs::write(p.join("interactions.tsv"), INTERACTIONS).unwrap();
        std::fs::write(p.join("kg.tsv"), KG).unwrap();
        std::fs::write(p.join("script.json"), script().to_string()).unwrap();
        let toml = format!(
            "catalog = \"games.jsonl\"\ninteractions = \"interactions.tsv\"\nkg = \"kg.tsv\"\nprofile_dir = \"profiles\"\nlisten = \"127.0.0.1:0\"\n{extra}\n[backend]\nmock_script = \"script.json\"\n"
        );
        let config_path = p.join("convrec.toml");
        std::fs::write(&config_path, toml).unwrap();
        Self { dir, config_path }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn config(&self) -> ServiceConfig {
        ServiceConfig::load(&self.config_path).unwrap()
    }

    pub fn runtime(&self) -> Arc<Runtime> {
        Arc::new(Runtime::from_config(&self.config()).unwrap())
    }

    pub fn app(&self) -> (Router, Arc<Runtime>) {
        let rt = self.runtime();
        (router(AppState::ready(rt.clone())), rt)
    }

    pub fn write(&self, name: &str, text: &str) -> PathBuf {
        let path = self.path(name);
        std::fs::write(&path, text).unwrap();
        path
    }
}

pub fn profile_file(dir: &Path, user: &str) -> PathBuf {
    dir.join("profiles").join(format!("{user}.json"))
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

pub async fn create_session(app: &Router, user: &str) -> String {
    let (status, body) = call_json(app, "POST", "/sessions", Some(json!({ "user_id": user }))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

/// `data:` payloads of an SSE body, in order.
pub fn sse_events(body: &[u8]) -> Vec<Value> {
    let text = std::str::from_utf8(body).unwrap();
    text.split("\n\n")
        .filter_map(|block| {
            let data: Vec<&str> = block
                .lines()
                .filter_map(|l| l.strip_prefix("data:"))
                .map(|d| d.strip_prefix(' ').unwrap_or(d))
                .collect();
            (!data.is_empty()).then(|| serde_json::from_str(&data.join("\n")).unwrap())
        })
        .collect()
}

pub struct Streamed {
    pub deltas: Vec<String>,
    pub last: Value,
}

impl Streamed {
    pub fn text(&self) -> String {
        self.deltas.concat()
    }
}

pub async fn post_message(app: &Router, session: &str, text: &str) -> Streamed {
    let (status, body) =
        call(app, "POST", &format!("/sessions/{session}/messages"), Some(json!({ "text": text }))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let mut events = sse_events(&body);
    let last = events.pop().expect("stream has a terminal event");
    let deltas = events.iter().map(|e| e["delta"].as_str().expect("delta event").to_string()).collect();
    Streamed { deltas, last }
}

/// Trace records with timing stripped.
pub fn untimed(trace: &Value) -> Vec<Value> {
    trace
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            let o = r.as_object_mut().unwrap();
            o.remove("started_ms");
            o.remove("ended_ms");
            r
        })
        .collect()
}
