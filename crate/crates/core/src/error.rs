use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Error, Debug)]
pub enum GesfError {
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GesfError {
    /// Short machine-friendly name of the error class.
    pub fn class(&self) -> &'static str {
        match self {
            GesfError::Parse { .. } => "parse",
            GesfError::Io { .. } => "io",
            GesfError::Validation(_) => "validation",
            GesfError::Argument(_) => "argument",
            GesfError::Config(_) => "config",
            GesfError::Numeric(_) => "numeric",
            GesfError::Training { .. } => "training",
            GesfError::Usage(_) => "usage",
            GesfError::Resource(_) => "resource",
            GesfError::Precondition(_) => "precondition",
            GesfError::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GesfError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = GesfError> = std::result::Result<T, E>;
