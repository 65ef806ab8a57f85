use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use super::engine::{CatalogResponse, Engine, RankRequest, RankResponse};
use super::error::ApiError;
use crate::error::{Error, Result};

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/catalog", get(catalog))
        .route("/api/chat", post(chat))
        .route("/api/rank", post(rank))
        .with_state(engine)
}

async fn healthz(State(engine): State<Arc<Engine>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "retrieval": engine.retrieval.is_some(),
        "generative": engine.generative.is_some(),
    }))
}

async fn catalog(State(engine): State<Arc<Engine>>) -> Json<CatalogResponse> {
    Json(engine.catalog())
}

fn body<T>(payload: std::result::Result<Json<T>, JsonRejection>) -> std::result::Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn blocking<T, F>(f: F) -> std::result::Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> std::result::Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

async fn chat(
    State(engine): State<Arc<Engine>>,
    payload: std::result::Result<Json<Value>, JsonRejection>,
) -> std::result::Result<Json<Value>, ApiError> {
    let req = body(payload)?;
    blocking(move || engine.chat(req)).await.map(Json)
}

async fn rank(
    State(engine): State<Arc<Engine>>,
    payload: std::result::Result<Json<RankRequest>, JsonRejection>,
) -> std::result::Result<Json<RankResponse>, ApiError> {
    let req = body(payload)?;
    blocking(move || engine.rank(&req)).await.map(Json)
}

/// Serves until the process is stopped.
pub async fn serve(engine: Arc<Engine>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(addr.to_string(), e))?;
    log::info!("listening on {}", listener.local_addr().map_err(|e| Error::io(addr.to_string(), e))?);
    axum::serve(listener, router(engine)).await.map_err(|e| Error::io(addr.to_string(), e))
}
