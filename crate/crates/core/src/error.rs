//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("state error: {0}")]
    State(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("load error at {path}:{line}: {message}")]
    Load {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("load error: {0}")]
    EmptyDataset(String),

    #[error("client {client_id} failed: {source}")]
    Client {
        client_id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round} failed: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable category, used for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Numeric(_) => "numeric",
            Error::State(_) => "state",
            Error::Sampling(_) => "sampling",
            Error::Evaluation(_) => "evaluation",
            Error::Load { .. } | Error::EmptyDataset(_) => "load",
            Error::Client { source, .. } | Error::Round { source, .. } => source.category(),
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
