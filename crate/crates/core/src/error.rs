use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = EonError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EonError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("group mismatch: expected order {expected}, found {found}")]
    GroupMismatch { expected: usize, found: usize },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("scene generation failed for seed {seed}: {reason}")]
    GenerationFailure { seed: u64, reason: String },

    #[error("label consistency error: {0}")]
    LabelConsistency(String),

    #[error("non-finite value in tensor `{tensor}`")]
    NonFinite { tensor: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EonError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EonError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        EonError::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            EonError::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
