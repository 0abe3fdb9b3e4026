//! HTTP service: sessions, the ask/clarify dialogue, helpfulness feedback,
//! health and latency statistics.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;
use va_core::metrics::timing_stats;
use va_core::reflection::{
    answer_clarification, ask_question, OutcomeKind, ReflectionError, ReflectionSession, Source, TurnOutcome,
};

use crate::app::Pipeline;
use crate::config::Config;

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub feedback_log: Option<PathBuf>,
    pub question_log: Option<PathBuf>,
    pub idle_timeout: Duration,
    pub ui_dir: Option<PathBuf>,
    pub cors_origins: Vec<String>,
}

impl ServiceOptions {
    pub fn from_config(config: &Config) -> Self {
        Self {
            feedback_log: config.feedback_log.clone(),
            question_log: config.question_log.clone(),
            idle_timeout: Duration::from_secs(config.session_idle_secs),
            ui_dir: config.ui_dir.clone(),
            cors_origins: config.cors_origins.clone(),
        }
    }
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self::from_config(&Config::default())
    }
}

#[derive(Debug)]
pub struct SessionRecord {
    pub session_id: String,
    pub created_at_ms: u64,
    pub reflection: ReflectionSession,
    pub turns: Vec<TurnOutcome>,
    /// (turn index, helpfulness 1 to 5)
    pub feedback: Vec<(usize, u8)>,
    last_active: Instant,
}

type SharedSession = Arc<Mutex<SessionRecord>>;

pub struct AppState {
    pipeline: Arc<Pipeline>,
    options: ServiceOptions,
    sessions: Mutex<HashMap<String, SharedSession>>,
    latencies_ms: Mutex<Vec<f64>>,
    log_guard: Mutex<()>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn new_session_id() -> String {
    let mut bytes = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

impl AppState {
    pub fn new(pipeline: Arc<Pipeline>, options: ServiceOptions) -> Arc<Self> {
        Arc::new(Self {
            pipeline,
            options,
            sessions: Mutex::new(HashMap::new()),
            latencies_ms: Mutex::new(Vec::new()),
            log_guard: Mutex::new(()),
        })
    }

    /// Latencies of every successful ask and clarify turn, in arrival order.
    pub fn latencies_ms(&self) -> Vec<f64> {
        lock(&self.latencies_ms).clone()
    }

    pub fn session_count(&self) -> usize {
        lock(&self.sessions).len()
    }

    /// Drops sessions idle for longer than the timeout. Busy sessions are kept.
    fn evict_idle(&self) {
        let timeout = self.options.idle_timeout;
        lock(&self.sessions).retain(|_, s| match s.try_lock() {
            Ok(record) => record.last_active.elapsed() < timeout,
            Err(_) => true,
        });
    }

    fn session(&self, id: &str) -> Option<SharedSession> {
        lock(&self.sessions).get(id).cloned()
    }

    fn create_session(&self) -> (String, SharedSession) {
        let id = new_session_id();
        let record = Arc::new(Mutex::new(SessionRecord {
            session_id: id.clone(),
            created_at_ms: unix_ms(),
            reflection: ReflectionSession::new(id.clone()),
            turns: Vec::new(),
            feedback: Vec::new(),
            last_active: Instant::now(),
        }));
        lock(&self.sessions).insert(id.clone(), Arc::clone(&record));
        (id, record)
    }

    fn append_log(&self, path: &Path, line: &serde_json::Value) -> std::io::Result<()> {
        let _guard = lock(&self.log_guard);
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(file, "{line}")
    }
}

#[derive(Debug, Deserialize)]
pub struct AskRequest {
    pub session_id: Option<String>,
    pub question: String,
}

#[derive(Debug, Deserialize)]
pub struct ClarifyRequest {
    pub clarification_answer: String,
}

#[derive(Debug, Deserialize)]
pub struct FeedbackRequest {
    pub session_id: String,
    pub turn_index: usize,
    pub helpfulness: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Answered,
    ClarificationNeeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub rewrites: u32,
    pub regenerations: u32,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireSource {
    pub chunk_id: String,
    pub score: f64,
}

impl From<&Source> for WireSource {
    fn from(s: &Source) -> Self {
        Self {
            chunk_id: s.chunk_id.clone(),
            score: s.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    pub session_id: String,
    pub status: Status,
    pub answer: Option<String>,
    pub clarification_question: Option<String>,
    pub sources: Vec<WireSource>,
    pub trace: TraceSummary,
}

impl AskResponse {
    fn from_outcome(session_id: String, outcome: &TurnOutcome) -> Self {
        let (status, answer, clarification_question) = match outcome.kind {
            OutcomeKind::Answer | OutcomeKind::Failed => (Status::Answered, Some(outcome.text.clone()), None),
            OutcomeKind::ClarificationRequest => (Status::ClarificationNeeded, None, Some(outcome.text.clone())),
        };
        Self {
            session_id,
            status,
            answer,
            clarification_question,
            sources: outcome.sources.iter().map(WireSource::from).collect(),
            trace: TraceSummary {
                rewrites: outcome.rewrites,
                regenerations: outcome.regenerations,
                elapsed_ms: outcome.elapsed_ms,
            },
        }
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn bad_body(rejection: JsonRejection) -> Response {
    error(StatusCode::BAD_REQUEST, rejection.body_text())
}

pub fn router(state: Arc<AppState>) -> Router {
    let origins: Vec<HeaderValue> = state
        .options
        .cors_origins
        .iter()
        .filter_map(|o| HeaderValue::from_str(o).ok())
        .collect();
    let cors = CorsLayer::new()
        .allow_origin(origins)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    let ui_dir = state.options.ui_dir.clone();
    let api = Router::new()
        .route("/api/ask", post(ask))
        .route("/api/sessions/{id}/clarify", post(clarify))
        .route("/api/feedback", post(feedback))
        .route("/api/health", get(health))
        .route("/api/stats", get(stats))
        .with_state(state);
    let app = match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(cors)
}

enum TurnKind {
    Ask,
    Clarify,
}

async fn run_turn_blocking(
    state: Arc<AppState>,
    session_id: String,
    session: SharedSession,
    input: String,
    kind: TurnKind,
) -> Response {
    let pipeline = Arc::clone(&state.pipeline);
    let joined = tokio::task::spawn_blocking(move || {
        let mut record = lock(&session);
        record.last_active = Instant::now();
        let deps = pipeline.turn_deps();
        let result = match kind {
            TurnKind::Ask => ask_question(&mut record.reflection, &input, &deps),
            TurnKind::Clarify => answer_clarification(&mut record.reflection, &input, &deps),
        };
        if let Ok(outcome) = &result {
            if outcome.provider_failure.is_none() {
                record.turns.push(outcome.clone());
            }
        }
        record.last_active = Instant::now();
        result
    })
    .await;

    let result = match joined {
        Ok(r) => r,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, format!("turn aborted: {e}")),
    };
    match result {
        Ok(outcome) => {
            if let Some(detail) = &outcome.provider_failure {
                return (
                    StatusCode::SERVICE_UNAVAILABLE,
                    Json(json!({
                        "error": "provider unreachable",
                        "detail": detail,
                        "session_id": session_id,
                        "fallback": outcome.text,
                    })),
                )
                    .into_response();
            }
            lock(&state.latencies_ms).push(outcome.elapsed_ms as f64);
            Json(AskResponse::from_outcome(session_id, &outcome)).into_response()
        }
        Err(ReflectionError::EmptyInput) => error(StatusCode::BAD_REQUEST, "input is empty"),
        Err(e @ ReflectionError::InvalidState(_)) => error(StatusCode::CONFLICT, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn ask(State(state): State<Arc<AppState>>, body: Result<Json<AskRequest>, JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(r) => return bad_body(r),
    };
    let question = req.question.trim().to_owned();
    if question.is_empty() {
        return error(StatusCode::BAD_REQUEST, "question is empty");
    }
    state.evict_idle();
    let (session_id, session) = match req.session_id {
        Some(id) => match state.session(&id) {
            Some(s) => (id, s),
            None => return error(StatusCode::NOT_FOUND, format!("unknown session {id}")),
        },
        None => state.create_session(),
    };
    if let Some(path) = &state.options.question_log {
        let line = json!({ "timestamp_ms": unix_ms(), "session_id": session_id, "question": question });
        if let Err(e) = state.append_log(path, &line) {
            eprintln!("question log {}: {e}", path.display());
        }
    }
    run_turn_blocking(state, session_id, session, question, TurnKind::Ask).await
}

async fn clarify(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ClarifyRequest>, JsonRejection>,
) -> Response {
    state.evict_idle();
    let Some(session) = state.session(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown session {id}"));
    };
    let Json(req) = match body {
        Ok(b) => b,
        Err(r) => return bad_body(r),
    };
    run_turn_blocking(state, id, session, req.clarification_answer, TurnKind::Clarify).await
}

async fn feedback(State(state): State<Arc<AppState>>, body: Result<Json<FeedbackRequest>, JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(r) => return bad_body(r),
    };
    let rating = match u8::try_from(req.helpfulness) {
        Ok(r @ 1..=5) => r,
        _ => return error(StatusCode::BAD_REQUEST, "helpfulness must be an integer from 1 to 5"),
    };
    let Some(session) = state.session(&req.session_id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown session {}", req.session_id));
    };
    {
        let mut record = lock(&session);
        if req.turn_index >= record.turns.len() {
            return error(StatusCode::NOT_FOUND, format!("unknown turn {}", req.turn_index));
        }
        record.feedback.push((req.turn_index, rating));
        record.last_active = Instant::now();
    }
    if let Some(path) = &state.options.feedback_log {
        let line = json!({
            "timestamp_ms": unix_ms(),
            "session_id": req.session_id,
            "turn_index": req.turn_index,
            "helpfulness": rating,
        });
        if let Err(e) = state.append_log(path, &line) {
            return error(StatusCode::INTERNAL_SERVER_ERROR, format!("cannot record feedback: {e}"));
        }
    }
    StatusCode::NO_CONTENT.into_response()
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsResponse {
    pub count: usize,
    pub mean_ms: Option<f64>,
    pub std_ms: Option<f64>,
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<StatsResponse> {
    let latencies = state.latencies_ms();
    let timing = timing_stats(&latencies).ok();
    Json(StatsResponse {
        count: latencies.len(),
        mean_ms: timing.map(|t| t.mean),
        std_ms: timing.and_then(|t| t.std),
    })
}

/// Serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
