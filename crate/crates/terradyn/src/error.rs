//! Error type shared across the toolkit.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum TdError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("feature matrix is rank deficient: rank {rank} < requested {requested} components")]
    RankDeficient { rank: usize, requested: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },

    #[error("rollout context has no initialized hidden state; run the warmup first")]
    UninitializedHidden,

    #[error("{0}")]
    Invalid(String),
}

impl TdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TdError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        TdError::Format { path: path.into(), reason: reason.into() }
    }
}
