mod common;

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use va::service::{router, AppState, ServiceOptions};
use va_core::llm::ScriptedRule;
use va_core::metrics::timing_stats;
use va_core::reflection::{ReflectionConfig, APOLOGY, CLARIFICATION_FALLBACK};
use va_core::FrozenClock;

use common::*;

fn options(dir: &Path) -> ServiceOptions {
    ServiceOptions {
        feedback_log: Some(dir.join("feedback.jsonl")),
        question_log: Some(dir.join("questions.jsonl")),
        idle_timeout: Duration::from_secs(1800),
        ui_dir: None,
        cors_origins: vec!["http://localhost:5173".into()],
    }
}

fn state_with(rules: Vec<ScriptedRule>, reflection: ReflectionConfig, opts: ServiceOptions) -> Arc<AppState> {
    let pipeline = scripted_pipeline(rules, reflection, Arc::new(RampClock::new(3)));
    AppState::new(Arc::new(pipeline), opts)
}

struct Reply {
    status: StatusCode,
    body: Value,
}

async fn call(state: &Arc<AppState>, method: Method, uri: &str, body: Option<Value>) -> Reply {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(Arc::clone(state)).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    Reply { status, body }
}

async fn ask(state: &Arc<AppState>, body: Value) -> Reply {
    call(state, Method::POST, "/api/ask", Some(body)).await
}

/// Checks a 200 ask/clarify body against the wire schema.
fn assert_ask_schema(body: &Value) {
    let obj = body.as_object().expect("object body");
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        ["answer", "clarification_question", "session_id", "sources", "status", "trace"]
    );
    let id = obj["session_id"].as_str().unwrap();
    assert_eq!(id.len(), 32);
    assert!(id.chars().all(|c| c.is_ascii_hexdigit()));
    match obj["status"].as_str().unwrap() {
        "answered" => {
            assert!(obj["answer"].is_string());
            assert!(obj["clarification_question"].is_null());
        }
        "clarification_needed" => {
            assert!(obj["answer"].is_null());
            assert!(obj["clarification_question"].is_string());
        }
        other => panic!("unexpected status {other}"),
    }
    for s in obj["sources"].as_array().unwrap() {
        let s = s.as_object().unwrap();
        assert_eq!(s.len(), 2);
        assert!(s["chunk_id"].is_string());
        assert!(s["score"].is_f64());
    }
    let trace = obj["trace"].as_object().unwrap();
    assert_eq!(trace.len(), 3);
    for key in ["rewrites", "regenerations", "elapsed_ms"] {
        assert!(trace[key].is_u64(), "{key}");
    }
}

#[tokio::test]
async fn health_is_ok() {
    let dir = tempfile::tempdir().unwrap();
    let state = state_with(yes_yes_rules(), ReflectionConfig::default(), options(dir.path()));
    let r = call(&state, Method::GET, "/api/health", None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body, json!({"status": "ok"}));
}

#[tokio::test]
async fn ask_answers_with_sources() {
    let dir = tempfile::tempdir().unwrap();
    let state = state_with(yes_yes_rules(), ReflectionConfig::default(), options(dir.path()));
    let r = ask(&state, json!({"question": "How many project meetings can I miss?"})).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_ask_schema(&r.body);
    assert_eq!(r.body["status"], "answered");
    assert_eq!(r.body["answer"], ANSWER);
    assert!(!r.body["sources"].as_array().unwrap().is_empty());
    assert_eq!(r.body["trace"]["rewrites"], 0);
    assert_eq!(r.body["trace"]["regenerations"], 0);

    let log = std::fs::read_to_string(dir.path().join("questions.jsonl")).unwrap();
    let line: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(line["question"], "How many project meetings can I miss?");
    assert_eq!(line["session_id"], r.body["session_id"]);
}

#[tokio::test]
async fn ask_reuses_an_existing_session() {
    let dir = tempfile::tempdir().unwrap();
    let state = state_with(yes_yes_rules(), ReflectionConfig::default(), options(dir.path()));
    let first = ask(&state, json!({"question": "Can I miss a meeting?"})).await;
    let id = first.body["session_id"].clone();
    let second = ask(&state, json!({"session_id": id, "question": "And a second one?"})).await;
    assert_eq!(second.status, StatusCode::OK);
    assert_eq!(second.body["session_id"], first.body["session_id"]);
    assert_eq!(state.session_count(), 1);
}

#[tokio::test]
async fn ask_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let state = state_with(yes_yes_rules(), ReflectionConfig::default(), options(dir.path()));
    for body in [json!({"question": ""}), json!({"question": "   "}), json!({}), json!({"question": 3})] {
        let r = ask(&state, body.clone()).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST, "{body}");
        assert!(r.body["error"].is_string());
    }
    let r = ask(&state, json!({"session_id": "00ff", "question": "Can I miss a meeting?"})).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(state.session_count(), 0);
}

#[tokio::test]
async fn unresolved_question_asks_for_clarification() {
    let dir = tempfile::tempdir().unwrap();
    let state = state_with(never_resolves(), ReflectionConfig::default(), options(dir.path()));
    let r = ask(&state, json!({"question": "What about the meeting?"})).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_ask_schema(&r.body);
    assert_eq!(r.body["status"], "clarification_needed");
    assert_eq!(r.body["clarification_question"], CLARIFICATION);
    assert_eq!(r.body["sources"], json!([]));
    assert_eq!(r.body["trace"]["rewrites"], 2);
}

#[tokio::test]
async fn clarification_reply_leads_to_answer() {
    let dir = tempfile::tempdir().unwrap();
    let budgets = ReflectionConfig {
        max_rewrites: 0,
        max_regenerations: 0,
    };
    let state = state_with(resolves_after(1), budgets, options(dir.path()));
    let r = ask(&state, json!({"question": "What about the meeting?"})).await;
    assert_eq!(r.body["status"], "clarification_needed");
    let id = r.body["session_id"].as_str().unwrap().to_owned();

    let uri = format!("/api/sessions/{id}/clarify");
    let r = call(&state, Method::POST, &uri, Some(json!({"clarification_answer": "The weekly one."}))).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_ask_schema(&r.body);
    assert_eq!(r.body["status"], "answered");
    assert_eq!(r.body["session_id"], id.as_str());
    assert_eq!(r.body["answer"], ANSWER);

    // The session is no longer waiting for a reply.
    let again = call(&state, Method::POST, &uri, Some(json!({"clarification_answer": "Again."}))).await;
    assert_eq!(again.status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn second_unresolved_clarification_ends_with_apology() {
    let dir = tempfile::tempdir().unwrap();
    let budgets = ReflectionConfig {
        max_rewrites: 0,
        max_regenerations: 0,
    };
    let state = state_with(never_resolves(), budgets, options(dir.path()));
    let r = ask(&state, json!({"question": "What about the meeting?"})).await;
    let id = r.body["session_id"].as_str().unwrap().to_owned();
    let uri = format!("/api/sessions/{id}/clarify");
    let r = call(&state, Method::POST, &uri, Some(json!({"clarification_answer": "The weekly one."}))).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_ask_schema(&r.body);
    assert_eq!(r.body["status"], "answered");
    assert_eq!(r.body["answer"], APOLOGY);
}

#[tokio::test]
async fn clarify_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let state = state_with(yes_yes_rules(), ReflectionConfig::default(), options(dir.path()));
    let r = call(
        &state,
        Method::POST,
        "/api/sessions/deadbeef/clarify",
        Some(json!({"clarification_answer": "x"})),
    )
    .await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);

    let answered = ask(&state, json!({"question": "Can I miss a meeting?"})).await;
    assert_eq!(answered.body["status"], "answered");
    let uri = format!("/api/sessions/{}/clarify", answered.body["session_id"].as_str().unwrap());
    let r = call(&state, Method::POST, &uri, Some(json!({"clarification_answer": "x"}))).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    let r = call(&state, Method::POST, &uri, Some(json!({"reply": "x"}))).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn feedback_is_validated_and_logged() {
    let dir = tempfile::tempdir().unwrap();
    let state = state_with(yes_yes_rules(), ReflectionConfig::default(), options(dir.path()));
    let answered = ask(&state, json!({"question": "Can I miss a meeting?"})).await;
    let id = answered.body["session_id"].clone();

    let r = call(
        &state,
        Method::POST,
        "/api/feedback",
        Some(json!({"session_id": id, "turn_index": 0, "helpfulness": 5})),
    )
    .await;
    assert_eq!(r.status, StatusCode::NO_CONTENT);
    assert!(r.body.is_null());
    let log = std::fs::read_to_string(dir.path().join("feedback.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["helpfulness"], 5);
    assert_eq!(lines[0]["turn_index"], 0);
    assert_eq!(lines[0]["session_id"], id);

    for bad in [6, 0, -1] {
        let r = call(
            &state,
            Method::POST,
            "/api/feedback",
            Some(json!({"session_id": id, "turn_index": 0, "helpfulness": bad})),
        )
        .await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST, "{bad}");
    }
    let r = call(
        &state,
        Method::POST,
        "/api/feedback",
        Some(json!({"session_id": id, "turn_index": 1, "helpfulness": 3})),
    )
    .await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = call(
        &state,
        Method::POST,
        "/api/feedback",
        Some(json!({"session_id": "nope", "turn_index": 0, "helpfulness": 3})),
    )
    .await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);

    let log = std::fs::read_to_string(dir.path().join("feedback.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[tokio::test]
async fn provider_failure_returns_503_with_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let state = state_with(Vec::new(), ReflectionConfig::default(), options(dir.path()));
    let r = ask(&state, json!({"question": "Can I miss a meeting?"})).await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(r.body["fallback"], CLARIFICATION_FALLBACK);
    assert!(r.body["error"].is_string());
    assert!(r.body["session_id"].is_string());

    let stats = call(&state, Method::GET, "/api/stats", None).await;
    assert_eq!(stats.body, json!({"count": 0, "mean_ms": null, "std_ms": null}));
}

#[tokio::test]
async fn stats_agree_with_recorded_latencies() {
    let dir = tempfile::tempdir().unwrap();
    let state = state_with(yes_yes_rules(), ReflectionConfig::default(), options(dir.path()));
    let mut elapsed = Vec::new();
    for q in ["Can I miss a meeting?", "Who assigns topics?", "When is the report due?"] {
        let r = ask(&state, json!({"question": q})).await;
        assert_eq!(r.status, StatusCode::OK);
        elapsed.push(r.body["trace"]["elapsed_ms"].as_u64().unwrap() as f64);
    }
    let expected = timing_stats(&elapsed).unwrap();
    let stats = call(&state, Method::GET, "/api/stats", None).await;
    assert_eq!(stats.status, StatusCode::OK);
    assert_eq!(stats.body["count"], 3);
    assert_eq!(stats.body["mean_ms"].as_f64().unwrap(), expected.mean);
    assert_eq!(stats.body["std_ms"].as_f64().unwrap(), expected.std.unwrap());
    assert!(expected.std.unwrap() > 0.0);
}

#[tokio::test]
async fn idle_sessions_are_evicted() {
    let dir = tempfile::tempdir().unwrap();
    let mut opts = options(dir.path());
    opts.idle_timeout = Duration::ZERO;
    let pipeline = scripted_pipeline(yes_yes_rules(), ReflectionConfig::default(), Arc::new(FrozenClock(0)));
    let state = AppState::new(Arc::new(pipeline), opts);
    let first = ask(&state, json!({"question": "Can I miss a meeting?"})).await;
    std::thread::sleep(Duration::from_millis(5));
    let r = ask(&state, json!({"session_id": first.body["session_id"], "question": "And now?"})).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn cors_allows_the_dev_origin() {
    let dir = tempfile::tempdir().unwrap();
    let state = state_with(yes_yes_rules(), ReflectionConfig::default(), options(dir.path()));
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/api/ask")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = router(state).oneshot(req).await.unwrap();
    assert_eq!(
        resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).unwrap(),
        "http://localhost:5173"
    );
}

#[tokio::test]
async fn serves_the_ui_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<h1>assistant</h1>").unwrap();
    let mut opts = options(dir.path());
    opts.ui_dir = Some(ui);
    let state = state_with(yes_yes_rules(), ReflectionConfig::default(), opts);
    let req = Request::builder().uri("/").body(Body::empty()).unwrap();
    let resp = router(state).oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&bytes[..], b"<h1>assistant</h1>");
}
