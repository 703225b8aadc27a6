use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GcrfError {
    /// The system matrix has a pivot below the rank-deficiency threshold.
    ///
    /// With an empty edit mask the constant vector lies in the nullspace of
    /// `(I - S)^T (I - S)`, which is the usual cause.
    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("edit {index} at (row {row}, col {col}) is outside the {width}x{height} grid")]
    OutOfBounds {
        index: usize,
        row: i64,
        col: i64,
        width: usize,
        height: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("image too small for SSIM: {width}x{height} (need at least 8x8)")]
    TooSmall { width: usize, height: usize },

    #[error("at least two samples are required for pairwise diversity")]
    NeedTwoSamples,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = GcrfError> = std::result::Result<T, E>;
