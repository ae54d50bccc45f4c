use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A binary tensor file that does not follow the WLT1 layout.
    #[error("malformed tensor at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter `{field}`: {message}")]
    InvalidParam { field: &'static str, message: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn param(field: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParam {
            field,
            message: message.into(),
        }
    }
}
