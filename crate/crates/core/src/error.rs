use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0}: input is empty")]
    EmptyInput(PathBuf),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    /// Fewer than two rising voltage zero-crossings were found.
    #[error("insufficient signal: found {found} rising zero-crossing(s), need at least 2")]
    InsufficientSignal { found: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("data error in row {row}: {message}")]
    Data { row: usize, message: String },

    #[error("model error: {0}")]
    Model(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
