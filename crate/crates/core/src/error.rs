use std::path::PathBuf;

use thiserror::Error;

/// Every failure the simulator can report.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value. `path` names the offending field.
    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    /// Empty or undersized data.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed input file (IDX, CSV dataset, availability trace).
    #[error("format error: {0}")]
    Format(String),

    #[error("partition error: {0}")]
    Partition(String),

    /// An aggregation strategy's protocol was violated, e.g. a client id
    /// outside `0..N` or missing first-round responses for MIFA.
    #[error("protocol error in round {round}: {message}")]
    Protocol { round: usize, message: String },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach round context to protocol errors raised without one.
    pub fn in_round(self, round: usize) -> Self {
        match self {
            Error::Protocol { message, .. } => Error::Protocol { round, message },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
