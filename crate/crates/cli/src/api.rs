//! JSON-over-HTTP front end for the teaching service.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use solobot_core::teaching::{Correction, TeachError, TeachJobRequest, TeachService};

pub struct ApiError(StatusCode, String);

impl From<TeachError> for ApiError {
    fn from(e: TeachError) -> Self {
        let status = match &e {
            TeachError::SessionNotFound(_) | TeachError::TurnNotFound { .. } => StatusCode::NOT_FOUND,
            TeachError::EmptyCorrection
            | TeachError::EmptyReplacement
            | TeachError::UnknownSlot { .. }
            | TeachError::BadK
            | TeachError::EmptyLogs
            | TeachError::EmptyTeachCorpus => StatusCode::UNPROCESSABLE_ENTITY,
            TeachError::Busy => StatusCode::CONFLICT,
            TeachError::NoHeldout => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Run a blocking service call off the async workers.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, TeachError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

pub fn router(service: Arc<TeachService>) -> Router {
    Router::new()
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/logs", get(get_logs))
        .route("/v1/logs/{session}", get(get_log))
        .route("/v1/corrections", post(post_correction))
        .route("/v1/corrections/cost", get(get_cost))
        .route("/v1/teach-jobs", post(post_job))
        .route("/v1/teach-jobs/{id}", get(get_job))
        .route("/v1/eval", get(get_eval))
        .with_state(service)
}

#[derive(Deserialize)]
struct Message {
    text: String,
}

async fn post_message(
    State(svc): State<Arc<TeachService>>,
    Path(id): Path<String>,
    Json(msg): Json<Message>,
) -> ApiResult<impl IntoResponse> {
    if msg.text.trim().is_empty() {
        return Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, "text is empty".into()));
    }
    let result = blocking(move || svc.chat_turn(&id, &msg.text)).await?;
    Ok(Json(result))
}

#[derive(Deserialize)]
struct LogsQuery {
    rank: Option<String>,
    k: Option<usize>,
}

#[derive(Serialize)]
struct LogSummary {
    session_id: String,
    checkpoint_id: String,
    turns: usize,
}

async fn get_logs(
    State(svc): State<Arc<TeachService>>,
    Query(q): Query<LogsQuery>,
) -> ApiResult<Response> {
    match q.rank.as_deref() {
        None => {
            let logs: Vec<LogSummary> = svc
                .logs()
                .into_iter()
                .map(|l| LogSummary {
                    session_id: l.id.clone(),
                    checkpoint_id: l.checkpoint_id.clone(),
                    turns: l.turns().len(),
                })
                .collect();
            Ok(Json(logs).into_response())
        }
        Some("perplexity") => {
            let k = q.k.unwrap_or(10);
            let ranked = blocking(move || svc.rank(k)).await?;
            Ok(Json(ranked).into_response())
        }
        Some(other) => Err(ApiError(
            StatusCode::BAD_REQUEST,
            format!("unknown ranking {other:?}; supported: perplexity"),
        )),
    }
}

async fn get_log(
    State(svc): State<Arc<TeachService>>,
    Path(session): Path<String>,
) -> ApiResult<impl IntoResponse> {
    svc.log(&session)
        .map(Json)
        .ok_or_else(|| TeachError::SessionNotFound(session).into())
}

async fn post_correction(
    State(svc): State<Arc<TeachService>>,
    Json(c): Json<Correction>,
) -> ApiResult<impl IntoResponse> {
    let echo = c.clone();
    let cost = svc.add_correction(c)?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "correction": echo, "cost": cost })),
    ))
}

#[derive(Deserialize)]
struct CostQuery {
    since: Option<DateTime<Utc>>,
}

async fn get_cost(
    State(svc): State<Arc<TeachService>>,
    Query(q): Query<CostQuery>,
) -> impl IntoResponse {
    Json(svc.cost_since(q.since))
}

async fn post_job(
    State(svc): State<Arc<TeachService>>,
    body: Option<Json<TeachJobRequest>>,
) -> ApiResult<impl IntoResponse> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let id = svc.start_job(req)?;
    let job = svc.job(id);
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn get_job(
    State(svc): State<Arc<TeachService>>,
    Path(id): Path<u64>,
) -> ApiResult<impl IntoResponse> {
    svc.job(id)
        .map(Json)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("teach job {id} not found")))
}

async fn get_eval(State(svc): State<Arc<TeachService>>) -> ApiResult<impl IntoResponse> {
    let report = blocking(move || svc.eval()).await?;
    Ok(Json(report))
}
