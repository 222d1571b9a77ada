use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: usize, message: String },

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    /// Training hit a non-finite objective. Carries the parameters from the
    /// last step that was still finite.
    #[error("training diverged at epoch {epoch}, step {step}: {diagnostic}")]
    Diverged {
        epoch: usize,
        step: usize,
        diagnostic: String,
        last_good: Box<crate::model::ModelParams>,
    },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("aggregation error: {0}")]
    Aggregate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
