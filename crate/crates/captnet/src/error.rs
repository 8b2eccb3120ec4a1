use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CaptError>;

/// Errors surfaced by tensor ops, model assembly, training, and I/O.
#[derive(Debug, Error)]
pub enum CaptError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("ppm: {0}")]
    Ppm(String),

    #[error("training aborted at iteration {iter} (lr {lr:.3e}): {detail}")]
    TrainingDiverged { iter: usize, lr: f64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CaptError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CaptError::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        CaptError::InvalidArgument { op, detail: detail.into() }
    }
}
