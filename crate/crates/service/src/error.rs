use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use gcrf_core::GcrfError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),

    #[error("edit set is empty; add at least one edit before solving")]
    EmptyEdits,

    #[error("edit {index} at (row {row}, col {col}) is outside the {width}x{height} grid")]
    OutOfBounds {
        index: usize,
        row: i64,
        col: i64,
        width: usize,
        height: usize,
    },

    #[error("pixel {p} is outside a grid of {pixels} pixels")]
    PixelOutOfRange { p: usize, pixels: usize },

    #[error("no model loaded; start the service with a checkpoint to enable sampling")]
    NoModel,

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("solve failed: {0}")]
    Unsolvable(String),

    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    index: Option<usize>,
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ServiceError::EmptyEdits => StatusCode::CONFLICT,
            ServiceError::OutOfBounds { .. } | ServiceError::PixelOutOfRange { .. } | ServiceError::Unsolvable(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ServiceError::NoModel => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            ServiceError::UnknownSession(_) => "unknown_session",
            ServiceError::EmptyEdits => "empty_edits",
            ServiceError::OutOfBounds { .. } => "out_of_bounds",
            ServiceError::PixelOutOfRange { .. } => "pixel_out_of_range",
            ServiceError::NoModel => "no_model",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Unsolvable(_) => "unsolvable",
            ServiceError::Internal(_) => "internal",
        }
    }
}

impl From<GcrfError> for ServiceError {
    fn from(e: GcrfError) -> Self {
        match e {
            GcrfError::OutOfBounds {
                index,
                row,
                col,
                width,
                height,
            } => ServiceError::OutOfBounds {
                index,
                row,
                col,
                width,
                height,
            },
            GcrfError::SingularSystem(_) | GcrfError::NoConvergence { .. } | GcrfError::NonFinite(_) => {
                ServiceError::Unsolvable(e.to_string())
            }
            GcrfError::InvalidInput(_)
            | GcrfError::Json(_)
            | GcrfError::Image(_)
            | GcrfError::Format(_)
            | GcrfError::TooSmall { .. }
            | GcrfError::DimensionMismatch(_)
            | GcrfError::NeedTwoSamples => ServiceError::BadRequest(e.to_string()),
            GcrfError::Io(_) => ServiceError::Internal(e.to_string()),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let index = match &self {
            ServiceError::OutOfBounds { index, .. } => Some(*index),
            _ => None,
        };
        let body = ErrorBody {
            error: self.kind(),
            message: self.to_string(),
            index,
        };
        (self.status(), Json(body)).into_response()
    }
}
