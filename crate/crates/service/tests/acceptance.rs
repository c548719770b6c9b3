//! Service integration acceptance: prints one PASS/FAIL line per criterion.

mod common;

use std::panic::AssertUnwindSafe;

use axum::Router;
use common::*;
use serde_json::Value;

const SCRIPT_A: [&str; 4] = ["I want an RPG under 20", "something cozy", "hello there", "anything cheap"];
const SCRIPT_B: [&str; 4] = ["something cozy", "anything cheap", "an RPG please", "hi"];

struct Run {
    trace: Vec<Value>,
    turns: Value,
    streamed: Vec<String>,
    plans: Vec<Value>,
}

async fn turn(app: &Router, id: &str, text: &str, run: &mut Run) {
    let s = post_message(app, id, text).await;
    assert_eq!(s.last["done"], true, "{}", s.last);
    run.streamed.push(s.text());
    run.plans.push(s.last["plan"].clone());
}

async fn finish(app: &Router, id: &str, mut run: Run) -> Run {
    let (_, snapshot) = call_json(app, "GET", &format!("/sessions/{id}/trace"), None).await;
    run.trace = untimed(&snapshot["trace"]);
    run.turns = snapshot["turns"].clone();
    run
}

fn empty() -> Run {
    Run { trace: Vec::new(), turns: Value::Null, streamed: Vec::new(), plans: Vec::new() }
}

async fn solo(user: &str, script: &[&str]) -> Run {
    let fx = Fixture::new();
    let (app, _) = fx.app();
    let id = create_session(&app, user).await;
    let mut run = empty();
    for t in script {
        turn(&app, &id, t, &mut run).await;
    }
    finish(&app, &id, run).await
}

/// Assistant turns stored in the session, in order.
fn stored_replies(turns: &Value) -> Vec<String> {
    turns
        .as_array()
        .unwrap()
        .iter()
        .filter(|m| m["role"] == "assistant")
        .map(|m| m["content"].as_str().unwrap().to_string())
        .collect()
}

async fn service_integration() -> String {
    let alone_a = solo("ua", &SCRIPT_A).await;
    let alone_b = solo("ub", &SCRIPT_B).await;
    assert_eq!(alone_a.trace.len(), 5, "retrieve+rank, retrieve+rank, chat, query");
    assert!(alone_a.streamed[0].contains("Eldervale"), "{}", alone_a.streamed[0]);

    // strictly alternating turns on one service
    let fx = Fixture::new();
    let (app, _) = fx.app();
    let (a, b) = (create_session(&app, "ua").await, create_session(&app, "ub").await);
    let (mut ra, mut rb) = (empty(), empty());
    for (ta, tb) in SCRIPT_A.iter().zip(SCRIPT_B) {
        turn(&app, &a, ta, &mut ra).await;
        turn(&app, &b, tb, &mut rb).await;
    }
    let (ra, rb) = (finish(&app, &a, ra).await, finish(&app, &b, rb).await);

    // both sessions driven concurrently
    let fx2 = Fixture::new();
    let (app2, _) = fx2.app();
    let (c, d) = (create_session(&app2, "ua").await, create_session(&app2, "ub").await);
    let drive = |id: String, script: [&'static str; 4]| {
        let app = app2.clone();
        tokio::spawn(async move {
            let mut run = empty();
            for t in script {
                turn(&app, &id, t, &mut run).await;
            }
            finish(&app, &id, run).await
        })
    };
    let (hc, hd) = (drive(c, SCRIPT_A), drive(d, SCRIPT_B));
    let (rc, rd) = (hc.await.unwrap(), hd.await.unwrap());

    for (got, want, label) in [
        (&ra, &alone_a, "interleaved A"),
        (&rb, &alone_b, "interleaved B"),
        (&rc, &alone_a, "concurrent A"),
        (&rd, &alone_b, "concurrent B"),
    ] {
        assert_eq!(got.trace, want.trace, "{label}: trace");
        assert_eq!(got.turns, want.turns, "{label}: turns");
        assert_eq!(got.plans, want.plans, "{label}: plans");
    }

    // stream integrity
    let mut checked = 0;
    for run in [&alone_a, &alone_b, &ra, &rb, &rc, &rd] {
        assert_eq!(run.streamed, stored_replies(&run.turns));
        checked += run.streamed.len();
    }

    // restart reloads long-term profiles byte for byte
    let fx3 = Fixture::new();
    let before = {
        let (app, rt) = fx3.app();
        let id = create_session(&app, "u9").await;
        for t in ["I love Eldervale", "I want an RPG under 20"] {
            assert_eq!(post_message(&app, &id, t).await.last["done"], true);
        }
        let profile = rt.session(&id).unwrap().profile().long_term;
        assert_eq!(profile.weight("g1"), 1.0);
        rt.shutdown().unwrap();
        profile
    };
    let path = profile_file(fx3.dir.path(), "u9");
    let bytes = std::fs::read(&path).unwrap();
    let (app, rt) = fx3.app();
    let id = create_session(&app, "u9").await;
    let after = rt.session(&id).unwrap().profile().long_term;
    assert_eq!(after, before);
    rt.shutdown().unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes, "re-flushed profile differs");

    format!(
        "{} trace records match solo runs (interleaved and concurrent); {checked} streamed turns equal stored turns; profile reloaded ({} bytes identical)",
        alone_a.trace.len() + alone_b.trace.len(),
        bytes.len()
    )
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let criteria: Vec<(&str, _)> = vec![("service integration", service_integration())];
    let mut failed = 0;
    let total = criteria.len();
    std::panic::set_hook(Box::new(|_| {}));
    for (name, fut) in criteria {
        match std::panic::catch_unwind(AssertUnwindSafe(|| rt.block_on(fut))) {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(e) => {
                failed += 1;
                let msg =
                    e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                println!("FAIL  {name}: {}", msg.unwrap_or_default());
            }
        }
    }
    println!("{} passed, {} failed", total - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
