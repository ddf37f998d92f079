use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EtmError>;

#[derive(Debug, Error)]
pub enum EtmError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("mining error: {0}")]
    Mining(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("training error: {0}")]
    Training(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl EtmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EtmError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        EtmError::Json {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numbers themselves (divergence,
    /// non-finite losses or gradients) rather than by inputs or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(self, EtmError::Training(_))
    }
}
