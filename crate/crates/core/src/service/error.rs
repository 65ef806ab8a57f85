use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Structured error body `{code, message}` with its HTTP status.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn unknown_image(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_image", format!("no features for image {id:?}"))
    }

    pub fn unknown_style(name: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_style", format!("style {name:?} is not in the catalog"))
    }

    pub fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id:?}"))
    }

    pub fn turn_order(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "turn_order", message)
    }

    pub fn too_many_candidates(n: usize) -> Self {
        Self::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "too_many_candidates",
            format!("{n} candidates exceeds the limit of {}", super::engine::MAX_RANK_CANDIDATES),
        )
    }

    pub fn not_loaded(what: &str) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", format!("{what} is not loaded"))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody { code: self.code.to_string(), message: self.message.clone() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match &e {
            Error::UnknownImage(id) => ApiError::unknown_image(id),
            Error::Catalog(name) => ApiError::unknown_style(name),
            Error::Contract(_) | Error::Vocabulary { .. } => ApiError::bad_request(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}
