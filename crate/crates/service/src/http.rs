//! HTTP surface over [`Service`].
//!
//! Routes:
//!
//! | Method | Path                      | Body / query          | Success |
//! |--------|---------------------------|-----------------------|---------|
//! | POST   | `/tasks`                  | [`TaskRegistration`]  | 201     |
//! | POST   | `/tasks/{id}/records`     | [`RecordSubmission`]  | 200     |
//! | POST   | `/tasks/{id}/jobs`        | empty                 | 202     |
//! | GET    | `/tasks/{id}/jobs`        |                       | 200     |
//! | GET    | `/tasks/{id}/scores`      | `?contributor={id}`   | 200     |
//! | GET    | `/jobs/{id}`              |                       | 200     |
//!
//! Every error body is an [`ErrorEnvelope`]: `{"error":{"kind","message"}}`
//! with 400 for invalid input, 404 for unknown ids, 409 for conflicts and
//! 500 for internal failures.

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use crate::types::{
    ErrorBody, ErrorEnvelope, JobView, RecordSubmission, RegisterResponse, ScoresResponse,
    SubmitResponse, TaskRegistration,
};
use crate::{Service, ServiceError};

pub fn router(service: Service) -> Router {
    Router::new()
        .route("/tasks", post(register))
        .route("/tasks/{task_id}/records", post(submit))
        .route("/tasks/{task_id}/jobs", post(trigger).get(list_jobs))
        .route("/tasks/{task_id}/scores", get(scores))
        .route("/jobs/{job_id}", get(job))
        .with_state(service)
}

/// Serves the router until the process exits.
pub async fn serve(service: Service, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}

struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Invalid(_) => StatusCode::BAD_REQUEST,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorEnvelope {
            error: ErrorBody { kind: self.0.kind().into(), message: self.0.to_string() },
        };
        (status, Json(body)).into_response()
    }
}

/// Registration, submission and triggering block on fsync (and registration
/// may train an ensemble), so they run off the async workers.
async fn run_blocking<T, F>(work: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(work)
        .await
        .map_err(|e| ApiError(ServiceError::Internal(format!("worker thread failed: {e}"))))?
        .map_err(ApiError)
}

async fn register(
    State(service): State<Service>,
    Json(registration): Json<TaskRegistration>,
) -> Result<(StatusCode, Json<RegisterResponse>), ApiError> {
    let response = run_blocking(move || service.register(&registration)).await?;
    Ok((StatusCode::CREATED, Json(response)))
}

async fn submit(
    State(service): State<Service>,
    Path(task_id): Path<String>,
    Json(submission): Json<RecordSubmission>,
) -> Result<Json<SubmitResponse>, ApiError> {
    let response = run_blocking(move || service.submit(&task_id, &submission)).await?;
    Ok(Json(response))
}

async fn trigger(
    State(service): State<Service>,
    Path(task_id): Path<String>,
) -> Result<(StatusCode, Json<JobView>), ApiError> {
    let view = run_blocking(move || service.trigger(&task_id)).await?;
    Ok((StatusCode::ACCEPTED, Json(view)))
}

async fn list_jobs(
    State(service): State<Service>,
    Path(task_id): Path<String>,
) -> Result<Json<Vec<JobView>>, ApiError> {
    Ok(Json(service.jobs(&task_id)?))
}

#[derive(Deserialize)]
struct ScoresQuery {
    contributor: String,
}

async fn scores(
    State(service): State<Service>,
    Path(task_id): Path<String>,
    Query(query): Query<ScoresQuery>,
) -> Result<Json<ScoresResponse>, ApiError> {
    Ok(Json(service.scores(&task_id, &query.contributor)?))
}

async fn job(
    State(service): State<Service>,
    Path(job_id): Path<String>,
) -> Result<Json<JobView>, ApiError> {
    Ok(Json(service.job(&job_id)?))
}
