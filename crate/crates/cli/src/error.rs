use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mandi_core::Error),

    #[error(transparent)]
    Service(#[from] mandi_service::ServiceError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}, line {line}: {message}")]
    Config {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// The command ran but did not reach its goal.
    #[error("{0}")]
    Failed(String),

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
