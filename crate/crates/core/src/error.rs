use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),

    /// Line-numbered failure while reading a key=value document.
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("batch of size {0} has no in-batch negatives (need at least 2)")]
    InsufficientNegatives(usize),

    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("eval error: {0}")]
    Eval(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI; distinct per error family.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::Io { .. } | Error::Format(_) => 3,
            Error::Dimension(_) | Error::Manifest(_) | Error::InsufficientNegatives(_) => 4,
            Error::Divergence { .. } => 5,
            Error::Checkpoint(_) => 6,
            Error::Split(_) | Error::Eval(_) => 7,
        }
    }
}
