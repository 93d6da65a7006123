use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("non-finite loss at step {step} (epoch {epoch}): {components}")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        components: String,
    },
}

impl TimError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        TimError::InvalidArgument(msg.into())
    }

    pub fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        TimError::Format {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TimError::Io {
            path: path.into(),
            source,
        }
    }
}
