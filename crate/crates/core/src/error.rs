use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Instance or assignment shape is inconsistent.
    #[error("structural error: {0}")]
    Structural(String),
    /// A probability row or matrix is not a valid distribution.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("sequence of length {len} exceeds model capacity {capacity}")]
    Capacity { len: usize, capacity: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("training fault: {0}")]
    TrainingFault(String),
    /// Malformed model file.
    #[error("model format error: {0}")]
    Format(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("unsupported feature: {0}")]
    Unsupported(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
