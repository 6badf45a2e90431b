//! Error type shared by every module.
//!
//! Errors fall in three families that the CLI maps onto exit codes:
//! configuration problems (bad shapes, bad settings, unusable input data),
//! numeric failures (non-finite values, divergence), and I/O or format errors.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid settings, mismatched dimensions or a violated precondition.
    #[error("configuration error: {0}")]
    Config(String),

    /// Data that cannot support the requested fit (e.g. zero covariance).
    #[error("degenerate data: {0}")]
    Degenerate(String),

    /// A non-finite value appeared during evaluation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Evaluation at a point where the function is not defined.
    #[error("singularity: {0}")]
    Singularity(String),

    /// Simulation or training left its safe operating region.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Malformed trajectory or checkpoint file.
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Whether the failure belongs to the numeric family (exit code 3).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::Divergence(_) | Error::Singularity(_)
        )
    }

    /// Whether the failure belongs to the configuration family (exit code 2).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Degenerate(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
