use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid document: {0}")]
    Validation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("{0}")]
    Empty(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code associated with this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Parse { .. } | Error::Validation(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::Checkpoint(_) | Error::Empty(_) => 2,
            Error::NonFinite(_) | Error::GradCheck(_) | Error::Shape { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
