//! HTTP surface under `/api/v1`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use tokio::net::TcpListener;
use tracing::{debug, info};

use crate::app::{App, OpKind, Operation};
use crate::config::Principal;
use crate::error::AppError;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
const BODY_LIMIT: usize = 256 * 1024 * 1024;

type Shared = State<Arc<App>>;

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body())).into_response()
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers.get("authorization")?.to_str().ok()?.strip_prefix("Bearer ").map(str::trim)
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, AppError> {
    serde_json::from_slice(body).map_err(|e| AppError::validation(format!("malformed request body: {e}")))
}

async fn run(app: Arc<App>, headers: HeaderMap, status: StatusCode, kind: OpKind, op: Result<Operation, AppError>) -> Response {
    let token = bearer(&headers).map(str::to_owned);
    let result = tokio::task::spawn_blocking(move || {
        let principal = match kind.permission() {
            None => Principal::local(),
            Some(_) => app.authenticate(token.as_deref())?.clone(),
        };
        kind.authorize(&principal)?;
        app.execute(&principal, op?)
    })
    .await
    .unwrap_or_else(|e| Err(AppError::storage(format!("request handler failed: {e}"))));
    match result {
        Ok(value) => (status, Json(value)).into_response(),
        Err(e) => {
            debug!(operation = kind.name(), status = e.status, code = %e.code, "request rejected");
            e.into_response()
        }
    }
}

async fn healthz(State(app): Shared, headers: HeaderMap) -> Response {
    run(app, headers, StatusCode::OK, OpKind::Health, Ok(Operation::Health)).await
}

async fn list_audits(State(app): Shared, headers: HeaderMap) -> Response {
    run(app, headers, StatusCode::OK, OpKind::ListAudits, Ok(Operation::ListAudits)).await
}

async fn create_audit(State(app): Shared, headers: HeaderMap, body: Bytes) -> Response {
    run(app, headers, StatusCode::CREATED, OpKind::CreateAudit, parse(&body).map(Operation::CreateAudit)).await
}

async fn get_audit(State(app): Shared, Path(audit_id): Path<String>, headers: HeaderMap) -> Response {
    run(app, headers, StatusCode::OK, OpKind::GetAudit, Ok(Operation::GetAudit { audit_id })).await
}

async fn recommendations(State(app): Shared, Path(audit_id): Path<String>, headers: HeaderMap) -> Response {
    run(app, headers, StatusCode::OK, OpKind::Recommendations, Ok(Operation::Recommendations { audit_id })).await
}

async fn selection(State(app): Shared, Path(audit_id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let op = parse(&body).map(|body| Operation::SelectQuestions { audit_id, body });
    run(app, headers, StatusCode::OK, OpKind::SelectQuestions, op).await
}

async fn bindings(State(app): Shared, Path(audit_id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let op = parse(&body).map(|binding| Operation::RegisterBinding { audit_id, binding });
    run(app, headers, StatusCode::OK, OpKind::RegisterBinding, op).await
}

async fn coverage(State(app): Shared, Path(audit_id): Path<String>, headers: HeaderMap) -> Response {
    run(app, headers, StatusCode::OK, OpKind::Coverage, Ok(Operation::Coverage { audit_id })).await
}

async fn state(State(app): Shared, Path(audit_id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let op = parse(&body).map(|body| Operation::Transition { audit_id, body });
    run(app, headers, StatusCode::OK, OpKind::Transition, op).await
}

async fn batch(State(app): Shared, Path(audit_id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let key = headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).unwrap_or("").to_owned();
    let op = parse(&body).map(|body| Operation::Ingest { audit_id, batch_key: key, body });
    run(app, headers, StatusCode::OK, OpKind::Ingest, op).await
}

async fn queries(State(app): Shared, Path(audit_id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let op = parse(&body).map(|body| Operation::Query { audit_id, body });
    run(app, headers, StatusCode::OK, OpKind::Query, op).await
}

async fn answers(State(app): Shared, Path(audit_id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let op = parse(&body).map(|body| Operation::Answer { audit_id, body });
    run(app, headers, StatusCode::OK, OpKind::Answer, op).await
}

async fn report(State(app): Shared, Path(audit_id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let op = parse(&body).map(|body| Operation::Report { audit_id, body });
    run(app, headers, StatusCode::OK, OpKind::Report, op).await
}

async fn get_catalog(State(app): Shared, headers: HeaderMap) -> Response {
    run(app, headers, StatusCode::OK, OpKind::GetCatalog, Ok(Operation::GetCatalog)).await
}

async fn put_catalog(State(app): Shared, headers: HeaderMap, body: Bytes) -> Response {
    run(app, headers, StatusCode::OK, OpKind::PutCatalog, Ok(Operation::PutCatalog { document: body.to_vec() })).await
}

async fn list_mappings(State(app): Shared, headers: HeaderMap) -> Response {
    run(app, headers, StatusCode::OK, OpKind::ListMappings, Ok(Operation::ListMappings)).await
}

async fn put_mapping(State(app): Shared, Path(mapping_id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let op = parse(&body).map(|spec| Operation::PutMapping { mapping_id, spec });
    run(app, headers, StatusCode::OK, OpKind::PutMapping, op).await
}

async fn fallback() -> Response {
    AppError::not_found("no such endpoint").into_response()
}

pub fn router(app: Arc<App>) -> Router {
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/audits", get(list_audits).post(create_audit))
        .route("/audits/{id}", get(get_audit))
        .route("/audits/{id}/recommendations", get(recommendations))
        .route("/audits/{id}/selection", post(selection))
        .route("/audits/{id}/bindings", post(bindings))
        .route("/audits/{id}/coverage", get(coverage))
        .route("/audits/{id}/state", post(state))
        .route("/audits/{id}/artefacts:batch", post(batch))
        .route("/audits/{id}/queries", post(queries))
        .route("/audits/{id}/answers", post(answers))
        .route("/audits/{id}/report", post(report))
        .route("/catalog", get(get_catalog).put(put_catalog))
        .route("/mappings", get(list_mappings))
        .route("/mappings/{id}", put(put_mapping));
    Router::new()
        .nest("/api/v1", api)
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(app)
}

/// Serves until ctrl-c.
pub async fn serve(app: Arc<App>, listener: TcpListener) -> std::io::Result<()> {
    info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Runs the server on a background thread and returns its bound address.
pub fn spawn(app: Arc<App>, addr: std::net::SocketAddr) -> std::io::Result<std::net::SocketAddr> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let bound = listener.local_addr()?;
    std::thread::spawn(move || {
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime");
        runtime.block_on(async move {
            let listener = TcpListener::from_std(listener).expect("listener");
            let _ = axum::serve(listener, router(app)).await;
        });
    });
    Ok(bound)
}
