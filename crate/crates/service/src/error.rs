use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] mandi_core::Error),

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

    #[error("source {source_name} failed for {date}: {message}")]
    Source {
        source_name: String,
        date: chrono::NaiveDate,
        message: String,
    },

    #[error("store lease held by {holder} since {since}")]
    LeaseHeld { holder: String, since: String },

    #[error("no market registry in the store; run ingest first")]
    NoRegistry,

    #[error("not found: {0}")]
    NotFound(String),

    #[error("{0}")]
    Invalid(String),
}

impl ServiceError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ServiceError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        ServiceError::Json {
            path: path.into(),
            source,
        }
    }
}
