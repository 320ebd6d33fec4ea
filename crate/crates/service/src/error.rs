use std::path::PathBuf;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    Validation(String),

    #[error("unknown {kind} `{id}`")]
    NotFound { kind: &'static str, id: String },

    #[error("project is busy: {0}")]
    Busy(String),

    #[error("stale batch: {0}")]
    Stale(String),

    #[error("corrupt project at {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("project version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error(transparent)]
    Core(#[from] alkit_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

/// Uniform error body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        use alkit_core::Error as E;
        match self {
            ServiceError::Validation(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound { .. } => StatusCode::NOT_FOUND,
            ServiceError::Busy(_) | ServiceError::Stale(_) => StatusCode::CONFLICT,
            ServiceError::Core(E::InvalidArgument(_) | E::DimensionMismatch { .. } | E::Format { .. } | E::Image(_)) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Validation(_) => "validation",
            ServiceError::NotFound { .. } => "not_found",
            ServiceError::Busy(_) => "busy",
            ServiceError::Stale(_) => "stale_batch",
            ServiceError::Corrupt { .. } | ServiceError::Version { .. } => "corrupt_project",
            _ if self.status() == StatusCode::BAD_REQUEST => "validation",
            _ => "internal",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.code().to_string(), message: self.to_string() };
        (self.status(), Json(body)).into_response()
    }
}
