use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pruning engine.
#[derive(Debug, Error)]
pub enum TapError {
    #[error("shape mismatch in {location}: expected {expected}, got {got}")]
    Shape {
        location: String,
        expected: String,
        got: String,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("all {attempts} fits failed; first error: {first}")]
    AllFailed { attempts: usize, first: String },

    #[error("malformed container {path:?}: {reason}")]
    Format { path: Option<PathBuf>, reason: String },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TapError {
    pub(crate) fn shape(location: impl Into<String>, expected: impl std::fmt::Display, got: impl std::fmt::Display) -> Self {
        TapError::Shape {
            location: location.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        TapError::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TapError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, TapError>;
