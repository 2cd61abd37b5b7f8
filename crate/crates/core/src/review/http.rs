//! JSON-over-HTTP routes for [`ReviewService`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use super::{CreateSession, Export, ReviewService, ServiceError, SubmitVerdict};

/// Header carrying the annotator id when the query or body does not.
pub const ANNOTATOR_HEADER: &str = "x-annotator";

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid(_) => StatusCode::BAD_REQUEST,
            ServiceError::KindMismatch(_) => StatusCode::CONFLICT,
            ServiceError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type Shared = Arc<ReviewService>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Invalid(format!("invalid payload: {e}")))
}

fn header_annotator(headers: &HeaderMap) -> Option<String> {
    headers
        .get(ANNOTATOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
}

/// Run a mutation off the async executor; it blocks on an fsync.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Storage(format!("worker failed: {e}")))?
}

async fn list_sessions(State(svc): State<Shared>) -> Response {
    Json(svc.list()).into_response()
}

async fn create_session(State(svc): State<Shared>, body: Bytes) -> Result<Response, ServiceError> {
    let req: CreateSession = parse_body(&body)?;
    let summary = blocking(move || svc.create_session(&req)).await?;
    Ok((StatusCode::CREATED, Json(summary)).into_response())
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

async fn next_item(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<NextQuery>,
    headers: HeaderMap,
) -> Result<Response, ServiceError> {
    let annotator = q
        .annotator
        .or_else(|| header_annotator(&headers))
        .filter(|a| !a.trim().is_empty())
        .ok_or_else(|| ServiceError::Invalid("annotator query parameter is required".into()))?;
    Ok(Json(svc.next_item(&id, &annotator)?).into_response())
}

async fn submit_verdict(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ServiceError> {
    let req: SubmitVerdict = parse_body(&body)?;
    let annotator = req
        .annotator
        .clone()
        .or_else(|| header_annotator(&headers))
        .unwrap_or_default();
    let outcome = blocking(move || svc.submit_verdict(&id, &annotator, &req)).await?;
    Ok(Json(outcome).into_response())
}

async fn summary(State(svc): State<Shared>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(svc.summary(&id)?).into_response())
}

#[derive(Deserialize)]
struct ExportQuery {
    #[serde(default)]
    partial: bool,
}

async fn export(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> Result<Response, ServiceError> {
    match svc.export(&id, q.partial)? {
        Export::Verdicts(v) => {
            let mut body = String::new();
            for verdict in &v {
                body.push_str(&serde_json::to_string(verdict).expect("verdicts serialize"));
                body.push('\n');
            }
            Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
        }
        Export::Session(s) => Ok(Json(s).into_response()),
    }
}

pub fn router(service: Arc<ReviewService>) -> Router {
    Router::new()
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/verdicts", axum::routing::post(submit_verdict))
        .route("/sessions/{id}/summary", get(summary))
        .route("/sessions/{id}/export", get(export))
        .with_state(service)
}

/// Serve on `listener` until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, service: Arc<ReviewService>) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Bind `addr`; port 0 picks a free port. Returns the listener and the
/// address actually bound.
pub async fn bind(addr: SocketAddr) -> std::io::Result<(tokio::net::TcpListener, SocketAddr)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}
