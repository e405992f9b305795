use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use talktrack::rlhf::Choice;

use crate::service::{FeedbackService, ServiceError};

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub code: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Protocol(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            error: self.message().to_owned(),
            code: self.code().to_owned(),
        };
        (status, Json(body)).into_response()
    }
}

type Shared = Arc<FeedbackService>;

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

#[derive(Deserialize)]
struct LabelBody {
    annotator: String,
    choice: Choice,
}

#[derive(Deserialize)]
struct ChatStartBody {
    segment: String,
}

#[derive(Serialize)]
struct ChatStarted {
    session_id: String,
}

#[derive(Deserialize)]
struct MessageBody {
    text: String,
}

async fn next_task(State(svc): State<Shared>, Query(q): Query<NextQuery>) -> Result<Response, ServiceError> {
    let annotator = q.annotator.unwrap_or_default();
    Ok(match svc.next_task(&annotator)? {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn label(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<LabelBody>,
) -> Result<Response, ServiceError> {
    Ok(Json(svc.submit_label(&id, &body.annotator, body.choice)?).into_response())
}

async fn chat_start(State(svc): State<Shared>, Json(body): Json<ChatStartBody>) -> Result<Response, ServiceError> {
    let session_id = svc.chat_start(&body.segment)?;
    Ok((StatusCode::CREATED, Json(ChatStarted { session_id })).into_response())
}

async fn chat_message(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<MessageBody>,
) -> Result<Response, ServiceError> {
    Ok(Json(svc.chat_message(&id, &body.text)?).into_response())
}

async fn metrics(State(svc): State<Shared>) -> Response {
    Json(svc.metrics()).into_response()
}

async fn health() -> Response {
    Json(serde_json::json!({ "status": "ok" })).into_response()
}

async fn fallback() -> ServiceError {
    ServiceError::NotFound("no such endpoint".into())
}

pub fn router(service: Arc<FeedbackService>) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}/label", post(label))
        .route("/api/chat", post(chat_start))
        .route("/api/chat/{id}/message", post(chat_message))
        .route("/api/metrics", get(metrics))
        .route("/api/health", get(health))
        .fallback(fallback)
        .with_state(service)
}

/// Serve until Ctrl-C.
pub async fn serve(service: Arc<FeedbackService>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
