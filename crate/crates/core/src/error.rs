use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TkgError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error in `{field}`: {message}")]
    Checkpoint { field: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TkgError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        TkgError::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        TkgError::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TkgError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, message: impl Into<String>) -> Self {
        TkgError::Checkpoint {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = TkgError> = std::result::Result<T, E>;
