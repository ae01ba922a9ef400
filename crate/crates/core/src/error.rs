use thiserror::Error;

use crate::series::Metric;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("insufficient data for {what}: need at least {needed}, got {got}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no trained model for vm {vm_id} ({metric})")]
    NotTrained { vm_id: String, metric: Metric },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(
        "line {line}: timestamp {timestamp} for vm {vm_id} goes backwards (previous {previous})"
    )]
    Ordering {
        line: usize,
        vm_id: String,
        timestamp: i64,
        previous: i64,
    },

    #[error("column mapping: {0}")]
    Mapping(String),

    #[error("window grid mismatch: {0}")]
    GridMismatch(String),

    #[error("unknown preset: {0}")]
    UnknownPreset(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("integrity check failed for {path}: {reason}")]
    Integrity { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by malformed input data rather than the environment.
    pub fn is_data_format(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Ordering { .. }
                | Error::Mapping(_)
                | Error::GridMismatch(_)
                | Error::Json(_)
                | Error::Csv(_)
                | Error::InvalidInput(_)
                | Error::EmptyInput(_)
                | Error::InsufficientData { .. }
                | Error::Integrity { .. }
        )
    }
}
