use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Variants are grouped by [`ErrorKind`] so callers (the CLI in particular)
/// can map them onto stable exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("unknown {what} `{key}`")]
    Lookup { what: &'static str, key: String },

    #[error("action `{action}` is not eligible for segment `{segment}`")]
    Ineligible { action: String, segment: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("oracle size {states} exceeds cap {cap}")]
    OracleSize { states: usize, cap: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("encoder fingerprint mismatch: artifact has {artifact}, runtime has {runtime}")]
    FingerprintMismatch { artifact: String, runtime: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("no training data: {0}")]
    NoTrainingData(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error classes; the CLI maps these onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Divergence,
    Usage,
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::FingerprintMismatch { .. } | Error::OracleSize { .. } => {
                ErrorKind::Config
            }
            Error::Divergence(_) => ErrorKind::Divergence,
            Error::Data(_)
            | Error::Schema { .. }
            | Error::NoTrainingData(_)
            | Error::Io { .. }
            | Error::Json(_) => ErrorKind::Data,
            Error::Lookup { .. }
            | Error::Ineligible { .. }
            | Error::Protocol(_)
            | Error::Dimension { .. }
            | Error::EmptyInput(_)
            | Error::Precondition(_) => ErrorKind::Usage,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
