//! HTTP front end for pairwise human evaluation.
//!
//! Annotators fetch blinded pairs and post verdicts; every verdict is
//! appended to a log and fsynced before it is acknowledged. Results are only
//! available when the service was started with the sealed assignment file.

mod coordinator;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fusion_core::humeval::{read_jsonl, AggregationMode, Choice, EvalPair, HiddenAssignment};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

pub use coordinator::{
    Ack, Clock, Coordinator, ManualClock, NextTask, Progress, ServiceConfig, ServiceError,
    SystemClock, TaskView,
};

pub type SharedCoordinator = Arc<Mutex<Coordinator>>;

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownAnnotator(_) => StatusCode::FORBIDDEN,
            ServiceError::LeaseExpired { .. } => StatusCode::CONFLICT,
            ServiceError::DuplicateJudgment { .. } => StatusCode::CONFLICT,
            ServiceError::UnknownPair(_) => StatusCode::NOT_FOUND,
            ServiceError::ResultsUnavailableInBlindMode => StatusCode::FORBIDDEN,
            ServiceError::UndecidedNotAllowed | ServiceError::BadRequest(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownAnnotator(_) => "unknown_annotator",
            ServiceError::LeaseExpired { .. } => "lease_expired",
            ServiceError::DuplicateJudgment { .. } => "duplicate_judgment",
            ServiceError::UnknownPair(_) => "unknown_pair",
            ServiceError::ResultsUnavailableInBlindMode => "results_unavailable_in_blind_mode",
            ServiceError::UndecidedNotAllowed => "undecided_not_allowed",
            ServiceError::BadRequest(_) => "bad_request",
            _ => "internal",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if self.status().is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        let body = Json(json!({"error": self.code(), "message": self.to_string()}));
        (self.status(), body).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct AnnotatorQuery {
    annotator: Option<String>,
}

#[derive(Debug, Deserialize)]
struct JudgmentBody {
    annotator: Option<String>,
    pair_id: String,
    choice: Choice,
    #[serde(default)]
    elapsed_s: f64,
}

#[derive(Debug, Deserialize)]
struct ResultsQuery {
    #[serde(default)]
    mode: AggregationMode,
}

fn annotator(body: Option<String>, query: Option<String>) -> Result<String, ServiceError> {
    body.or(query)
        .filter(|a| !a.trim().is_empty())
        .ok_or_else(|| ServiceError::BadRequest("annotator id is required".into()))
}

fn lock(state: &SharedCoordinator) -> std::sync::MutexGuard<'_, Coordinator> {
    state
        .lock()
        .unwrap_or_else(|poisoned| poisoned.into_inner())
}

async fn next_task(
    State(state): State<SharedCoordinator>,
    Query(q): Query<AnnotatorQuery>,
) -> Result<Json<NextTask>, ServiceError> {
    let id = annotator(None, q.annotator)?;
    Ok(Json(lock(&state).next_task(&id)?))
}

async fn submit(
    State(state): State<SharedCoordinator>,
    Query(q): Query<AnnotatorQuery>,
    body: Result<Json<JudgmentBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<Ack>, ServiceError> {
    let Json(body) = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let id = annotator(body.annotator, q.annotator)?;
    let state = state.clone();
    // the log fsync blocks; keep it off the async workers
    tokio::task::spawn_blocking(move || {
        lock(&state).submit(&id, &body.pair_id, body.choice, body.elapsed_s)
    })
    .await
    .map_err(|e| ServiceError::Io(std::io::Error::other(e)))?
    .map(Json)
}

async fn progress(State(state): State<SharedCoordinator>) -> Json<Progress> {
    Json(lock(&state).progress())
}

async fn results(
    State(state): State<SharedCoordinator>,
    Query(q): Query<ResultsQuery>,
) -> Result<Response, ServiceError> {
    let report = lock(&state).results(q.mode)?;
    Ok(Json(report).into_response())
}

/// Routes for the API, plus static files from `static_dir` when given.
pub fn router(state: SharedCoordinator, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/task", get(next_task))
        .route("/api/judgment", post(submit))
        .route("/api/progress", get(progress))
        .route("/api/results", get(results))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub tasks: PathBuf,
    pub log: PathBuf,
    pub assignments: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
    pub addr: SocketAddr,
    pub config: ServiceConfig,
}

pub fn open_coordinator(
    options: &ServeOptions,
    clock: Arc<dyn Clock>,
) -> Result<Coordinator, ServiceError> {
    let pairs: Vec<EvalPair> = read_jsonl(&options.tasks)?;
    let assignments: Option<Vec<HiddenAssignment>> =
        options.assignments.as_deref().map(read_jsonl).transpose()?;
    Coordinator::open(
        pairs,
        assignments,
        &options.log,
        options.config.clone(),
        clock,
    )
}

/// Runs the service until Ctrl-C.
pub async fn serve(options: ServeOptions) -> Result<(), ServiceError> {
    let coordinator = open_coordinator(&options, Arc::new(SystemClock))?;
    let trusted = coordinator.is_trusted();
    let app = router(
        Arc::new(Mutex::new(coordinator)),
        options.static_dir.as_deref(),
    );
    let listener = tokio::net::TcpListener::bind(options.addr).await?;
    tracing::info!(addr = %listener.local_addr()?, trusted, "annotation service listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
