//! JSON HTTP API. Request and response shapes are documented in docs/api.md.

use std::sync::Arc;
use std::time::Instant;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tlqa_core::decompose::DecompositionResult;
use tlqa_core::eval::{evaluate, EvalReport, QaRecord};
use tlqa_core::pipeline::{AnswerStrategy, Pipeline, Strategy, WithConfig};
use tlqa_core::query::SensorContext;
use tlqa_core::store::predict_labels;

use crate::state::{AppState, ChatSession, Exchange, StateError};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn no_store() -> Self {
        Self::new(StatusCode::CONFLICT, "no embedding store is loaded")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<StateError> for ApiError {
    fn from(e: StateError) -> Self {
        let status = match e {
            StateError::BadData(_) => StatusCode::BAD_REQUEST,
            StateError::NoModel | StateError::Conflict(_) => StatusCode::CONFLICT,
            StateError::Load(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/chat", post(chat))
        .route("/api/timeline", get(timeline))
        .route("/api/ingest", post(ingest))
        .route("/api/eval", post(eval))
        .route("/api/labels", get(labels))
        .route("/api/health", get(health))
        .with_state(state)
}

/// Run CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

fn system_now() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// The request's user, else the config default, else the store's only user.
fn pick_user(requested: Option<&str>, state: &AppState, pipeline: &Pipeline) -> Result<String, ApiError> {
    if let Some(u) = requested.or(state.config.default_user.as_deref()) {
        return Ok(u.to_string());
    }
    match pipeline.store.users().as_slice() {
        [only] => Ok(only.to_string()),
        _ => Err(ApiError::new(StatusCode::BAD_REQUEST, "user_id is required")),
    }
}

#[derive(Debug, Deserialize)]
pub struct ChatRequest {
    pub session_id: String,
    pub question: String,
    pub now: Option<i64>,
    pub user_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatResponse {
    pub session_id: String,
    pub user_id: String,
    pub now: i64,
    pub answer: String,
    pub short_answer: String,
    pub source: tlqa_core::assemble::AnswerSource,
    pub decomposition: DecompositionResult,
    pub contexts: Vec<SensorContext>,
    pub notes: Vec<String>,
    pub latency_ms: f64,
}

async fn chat(State(state): State<Arc<AppState>>, Json(req): Json<ChatRequest>) -> ApiResult<ChatResponse> {
    if req.question.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "question is empty"));
    }
    if req.session_id.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "session_id is empty"));
    }
    let pipeline = state.pipeline().ok_or_else(ApiError::no_store)?;
    let (user, now) = {
        let sessions = state.sessions.lock().expect("sessions lock");
        let existing = sessions.get(&req.session_id);
        let user = pick_user(
            req.user_id.as_deref().or(existing.map(|s| s.user_id.as_str())),
            &state,
            &pipeline,
        )?;
        let now = req.now.or(existing.and_then(|s| s.now_override)).unwrap_or_else(system_now);
        (user, now)
    };
    if pipeline.store.user_range(&user).is_empty() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no data for user {user}")));
    }
    let question = req.question.clone();
    let (u, p) = (user.clone(), pipeline.clone());
    let (trace, latency_ms) = blocking(move || {
        let start = Instant::now();
        let trace = p.answer_trace(&question, &u, now);
        (trace, (start.elapsed().as_secs_f64() * 1e3).max(1e-6))
    })
    .await?;
    // decomposition failed on every path, or the specs cannot run
    let trace = trace.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;

    let mut sessions = state.sessions.lock().expect("sessions lock");
    let session = sessions.entry(req.session_id.clone()).or_insert_with(|| ChatSession {
        session_id: req.session_id.clone(),
        user_id: user.clone(),
        now_override: req.now,
        history: Vec::new(),
    });
    session.history.push(Exchange {
        question: req.question,
        answer: trace.answer.clone(),
        latency_ms,
    });
    Ok(Json(ChatResponse {
        session_id: req.session_id,
        user_id: user,
        now,
        answer: trace.answer.full_answer,
        short_answer: trace.answer.short_answer,
        source: trace.answer.source,
        decomposition: trace.decomposition,
        contexts: trace.answer.contexts_used,
        notes: trace.notes,
        latency_ms,
    }))
}

#[derive(Debug, Deserialize)]
pub struct TimelineQuery {
    pub user_id: Option<String>,
    pub from: i64,
    pub to: i64,
    pub k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ScoredLabel {
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct TimelineEntry {
    pub timestamp: i64,
    pub labels: Vec<ScoredLabel>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct TimelineSlice {
    pub user_id: String,
    pub entries: Vec<TimelineEntry>,
}

async fn timeline(State(state): State<Arc<AppState>>, Query(q): Query<TimelineQuery>) -> ApiResult<TimelineSlice> {
    if q.to < q.from {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "range must have from <= to"));
    }
    let pipeline = state.pipeline().ok_or_else(ApiError::no_store)?;
    let user = pick_user(q.user_id.as_deref(), &state, &pipeline)?;
    let k = q.k.unwrap_or(pipeline.config.top_k).max(1);
    let u = user.clone();
    let entries = blocking(move || {
        let range = pipeline.store.range_in(&u, &tlqa_core::calendar::Interval::new(q.from, q.to));
        pipeline.store.records[range]
            .iter()
            .map(|r| {
                let labels = predict_labels(&pipeline.store, pipeline.scorer.as_ref(), &pipeline.targets, &u, r.timestamp, k)
                    .unwrap_or_default()
                    .into_iter()
                    .map(|(label, score)| ScoredLabel { label, score })
                    .collect();
                TimelineEntry {
                    timestamp: r.timestamp,
                    labels,
                }
            })
            .collect()
    })
    .await?;
    Ok(Json(TimelineSlice { user_id: user, entries }))
}

#[derive(Debug, Deserialize)]
pub struct IngestRequest {
    pub csv: String,
}

async fn ingest(State(state): State<Arc<AppState>>, Json(req): Json<IngestRequest>) -> ApiResult<crate::state::IngestSummary> {
    let s = state.clone();
    Ok(Json(blocking(move || s.ingest_csv(&req.csv)).await??))
}

#[derive(Debug, Deserialize, Default, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Templates,
    Llm,
}

#[derive(Debug, Deserialize)]
pub struct EvalRequest {
    pub records: Vec<QaRecord>,
    #[serde(default)]
    pub mode: EvalMode,
}

async fn eval(State(state): State<Arc<AppState>>, Json(req): Json<EvalRequest>) -> ApiResult<EvalReport> {
    let pipeline = state.pipeline().ok_or_else(ApiError::no_store)?;
    if req.records.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "no records"));
    }
    for (i, r) in req.records.iter().enumerate() {
        r.validate()
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("record {i}: {e}")))?;
    }
    if req.mode == EvalMode::Llm && pipeline.gateway.is_none() {
        return Err(ApiError::new(StatusCode::CONFLICT, "llm mode needs a configured gateway"));
    }
    let report = blocking(move || {
        let mut config = pipeline.config.clone();
        (config.decompose, config.answer) = match req.mode {
            EvalMode::Templates => (Strategy::Rules, AnswerStrategy::Templates),
            EvalMode::Llm => (Strategy::Llm, AnswerStrategy::Llm),
        };
        evaluate(&req.records, &WithConfig(&pipeline, config))
    })
    .await?
    .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    Ok(Json(report))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelEntry {
    pub label: String,
    pub surface_forms: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelsResponse {
    pub labels: Vec<LabelEntry>,
}

async fn labels(State(state): State<Arc<AppState>>) -> ApiResult<LabelsResponse> {
    let pipeline = state.pipeline().ok_or_else(ApiError::no_store)?;
    let labels = pipeline
        .targets
        .iter()
        .map(|t| LabelEntry {
            label: t.phrase.clone(),
            surface_forms: pipeline.lexicon.surface_forms(&t.phrase),
        })
        .collect();
    Ok(Json(LabelsResponse { labels }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub store_loaded: bool,
    pub records: usize,
    pub users: Vec<String>,
    pub gateway: String,
    pub sessions: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let pipeline = state.pipeline();
    let gateway = match pipeline.as_ref().and_then(|p| p.gateway.as_ref()) {
        None => "none".to_string(),
        Some(g) => serde_json::to_value(g.config.mode)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default(),
    };
    Json(Health {
        status: "ok".into(),
        store_loaded: pipeline.is_some(),
        records: pipeline.as_ref().map_or(0, |p| p.store.len()),
        users: pipeline
            .as_ref()
            .map(|p| p.store.users().into_iter().map(String::from).collect())
            .unwrap_or_default(),
        gateway,
        sessions: state.sessions.lock().expect("sessions lock").len(),
    })
}
