use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters, shapes, or configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// A forward pass produced a non-finite value from finite inputs.
    #[error("numerical fault at node {node} ({op}): non-finite output")]
    Numerical { node: usize, op: &'static str },

    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The model does not provide the requested capability (e.g. explicit
    /// log-likelihood in implicit mode).
    #[error("capability error: {0}")]
    Capability(String),

    /// An MDP step was requested after the final experiment.
    #[error("episode complete: step {t} requested with horizon {horizon}")]
    EpisodeComplete { t: usize, horizon: usize },

    /// Training diverged; carries a diagnostic dump.
    #[error("training diverged at iteration {iter}: {diagnostic}")]
    Diverged { iter: usize, diagnostic: String },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("toml: {0}")]
    Toml(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
