use std::io;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("numerics error{}: {message}", epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default())]
    Numerics { message: String, epoch: Option<usize> },
    #[error("passport error: {0}")]
    Passport(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("attack error: {0}")]
    Attack(String),
    #[error("verification error: {0}")]
    Verification(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

impl Error {
    pub fn numerics(message: impl Into<String>) -> Self {
        Error::Numerics {
            message: message.into(),
            epoch: None,
        }
    }
}
