//! HTTP front end for the annotation service. Annotators authenticate with a
//! bearer token; every error body is `{code, message}`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::header::{AUTHORIZATION, RETRY_AFTER};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use cig_core::annotation::{
    calibration_items, grade_prescreen, AnnotationError, AnnotationService, ErrorCode,
    PrescreenAnswer, ScoreInput,
};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Bearer token → annotator id.
    pub tokens: BTreeMap<String, String>,
    pub prescreen_pass: f64,
    pub prescreen_tolerance: u8,
}

struct AppState {
    service: Arc<AnnotationService>,
    config: ServerConfig,
}

type Shared = Arc<AppState>;

#[derive(Debug, Serialize)]
struct ErrorBody {
    code: String,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    retry_after: Option<u64>,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                retry_after: None,
            },
        }
    }
}

fn status_of(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::UnknownSession | ErrorCode::UnknownTask => StatusCode::NOT_FOUND,
        ErrorCode::NotAssigned | ErrorCode::NotServed => StatusCode::FORBIDDEN,
        ErrorCode::OutOfOrder | ErrorCode::SessionComplete | ErrorCode::InsufficientAnnotators => {
            StatusCode::CONFLICT
        }
        ErrorCode::LockActive => StatusCode::LOCKED,
        ErrorCode::OutOfRange
        | ErrorCode::MissingTargets
        | ErrorCode::InvalidTargets
        | ErrorCode::InvalidScores => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorCode::Storage => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        Self {
            status: status_of(e.code),
            body: ErrorBody {
                code: e.code.as_str().into(),
                message: e.message,
                retry_after: e.retry_after,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let retry = self.body.retry_after;
        let mut resp = (self.status, Json(self.body)).into_response();
        if let Some(s) = retry {
            resp.headers_mut().insert(RETRY_AFTER, HeaderValue::from(s));
        }
        resp
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn annotator(state: &AppState, headers: &HeaderMap) -> Result<String, ApiError> {
    let token = headers
        .get(AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing bearer token",
            )
        })?;
    state
        .config
        .tokens
        .get(token.trim())
        .cloned()
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "unknown bearer token",
            )
        })
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", e.to_string()))
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn tutorial(State(state): State<Shared>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "lock_seconds": state.service.lock_seconds(),
        "scale": {
            "1": "adds nothing new or is off topic",
            "2": "adds a minor or loosely related point",
            "3": "adds a clear, relevant point the discussion lacked",
            "4": "adds something that changes how the discussion should proceed",
        },
        "examples": calibration_items(),
    }))
}

#[derive(Serialize)]
struct PrescreenItem {
    id: String,
    prior: String,
    utterance: String,
}

async fn prescreen_items() -> Json<Vec<PrescreenItem>> {
    Json(
        calibration_items()
            .into_iter()
            .map(|i| PrescreenItem {
                id: i.id,
                prior: i.prior,
                utterance: i.utterance,
            })
            .collect(),
    )
}

async fn prescreen(
    State(state): State<Shared>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<serde_json::Value> {
    let who = annotator(&state, &headers)?;
    let answers: Vec<PrescreenAnswer> = parse_body(&body)?;
    let result = grade_prescreen(
        &answers,
        state.config.prescreen_pass,
        state.config.prescreen_tolerance,
    );
    tracing::info!(annotator = %who, passed = result.passed, "prescreen graded");
    Ok(Json(
        serde_json::to_value(result).expect("result serializes"),
    ))
}

#[derive(Deserialize)]
struct NextTaskQuery {
    segment: Option<usize>,
}

async fn next_task(
    State(state): State<Shared>,
    headers: HeaderMap,
    Path(session): Path<String>,
    Query(q): Query<NextTaskQuery>,
) -> ApiResult<cig_core::annotation::AnnotationTask> {
    let who = annotator(&state, &headers)?;
    Ok(Json(state.service.serve_task(&session, &who, q.segment)?))
}

async fn submit(
    State(state): State<Shared>,
    headers: HeaderMap,
    Path(task): Path<String>,
    body: Bytes,
) -> ApiResult<cig_core::annotation::Receipt> {
    let who = annotator(&state, &headers)?;
    let scores: Vec<ScoreInput> = parse_body(&body)?;
    Ok(Json(state.service.submit_ratings(&task, &who, &scores)?))
}

async fn agreement(
    State(state): State<Shared>,
    headers: HeaderMap,
    Path(session): Path<String>,
) -> ApiResult<cig_core::annotation::SessionAgreement> {
    annotator(&state, &headers)?;
    Ok(Json(state.service.session_agreement(&session)?))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(service: Arc<AnnotationService>, config: ServerConfig) -> Router {
    let state = Arc::new(AppState { service, config });
    Router::new()
        .route("/health", get(health))
        .route("/tutorial", get(tutorial))
        .route("/prescreen", get(prescreen_items).post(prescreen))
        .route("/sessions/{id}/next-task", get(next_task))
        .route("/sessions/{id}/agreement", get(agreement))
        .route("/tasks/{id}/ratings", post(submit))
        .fallback(fallback)
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "annotation service listening");
    axum::serve(listener, app).await
}
