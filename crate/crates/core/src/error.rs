use thiserror::Error;

/// Errors surfaced by the engine, the model and the harness.
#[derive(Debug, Error)]
pub enum HctError {
    /// Mismatched or out-of-range extents.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration (divisibility, strides, unknown names, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input that makes an operation undefined, e.g. a zero vector to normalize.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// API misuse (non-scalar loss, batch too small for negatives, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid labels or boxes in a dataset.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary container.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// NaN or infinity encountered.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = HctError> = std::result::Result<T, E>;

impl HctError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            HctError::Config(_) | HctError::Usage(_) => 2,
            HctError::Data(_) | HctError::Format { .. } | HctError::Io(_) | HctError::Json(_) => 3,
            HctError::Numerical(_) | HctError::Degenerate(_) => 4,
            HctError::Dimension(_) => 2,
        }
    }
}
