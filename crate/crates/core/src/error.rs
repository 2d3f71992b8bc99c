use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error at {path}: {message}")]
    Io { path: PathBuf, message: String },

    /// A non-finite value surfaced in a loss term or activation.
    #[error("numeric error in `{term}`{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric { term: String, step: Option<u64> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("super-resolution must not run inside a training step")]
    TrainingGuard,

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    pub(crate) fn numeric(term: impl Into<String>) -> Self {
        Error::Numeric {
            term: term.into(),
            step: None,
        }
    }

    /// Caller-side input problems, as opposed to internal failures.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Dimension(_) | Error::Argument(_))
    }

    /// Attach the step index to a numeric error; other variants pass through.
    pub fn at_step(self, step: u64) -> Self {
        match self {
            Error::Numeric { term, .. } => Error::Numeric {
                term,
                step: Some(step),
            },
            other => other,
        }
    }
}
