use std::path::PathBuf;

use thiserror::Error;

use crate::objective::ElboBreakdown;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a precondition (shape, range, or call-order contract).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("infinite divergence: q assigns mass {q} to component {index} where p is zero")]
    InfiniteDivergence { index: usize, q: f64 },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("capacity error: need {needed} samples, only {available} available")]
    Capacity { needed: usize, available: usize },

    #[error("PCA needs at least {needed} points, got {got}")]
    Rank { needed: usize, got: usize },

    #[error("training diverged at step {step}: {breakdown}")]
    Divergence {
        step: u64,
        breakdown: Box<ElboBreakdown>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
