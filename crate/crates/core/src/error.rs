//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("provider `{provider}` failed: {message}")]
    Provider { provider: String, message: String },

    /// A response that never passed schema validation. The raw text of the
    /// last attempt is kept for audit.
    #[error("response for schema `{schema}` failed validation: {message}")]
    SchemaInvalid {
        schema: String,
        message: String,
        raw: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("line {line}: {message}")]
    Transcript { line: usize, message: String },

    #[error("stage `{needed_by}` requires stage `{stage}` to have run first")]
    MissingStage { stage: String, needed_by: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::MissingStage { .. } => 2,
            Error::Provider { .. } => 3,
            Error::SchemaInvalid { .. } | Error::Validation(_) | Error::Transcript { .. } => 4,
            Error::Io(_) | Error::Json(_) => 1,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
