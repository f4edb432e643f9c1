use std::path::PathBuf;

/// Errors surfaced by the library. The variants group into the three failure
/// families the CLI maps onto exit codes: usage, data, and numeric.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid document: {0}")]
    InvalidDocument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite {component} loss at step {step}")]
    NonFinite { component: String, step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => ErrorKind::Usage,
            Error::NonFinite { .. } | Error::Tensor(_) => ErrorKind::Numeric,
            Error::InvalidDocument(_)
            | Error::Shape(_)
            | Error::Data(_)
            | Error::Io { .. }
            | Error::Json(_) => ErrorKind::Data,
        }
    }
}
