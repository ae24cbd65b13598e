//! Crate-wide error type and the exit-code mapping used by the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, VistaError>;

#[derive(Debug, Error)]
pub enum VistaError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("empty context: {0}")]
    EmptyContext(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("frozen-violation: attempted to update frozen tensor `{0}`")]
    FrozenViolation(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl VistaError {
    pub fn dim(msg: impl Into<String>) -> Self {
        VistaError::Dimension(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        VistaError::Numeric(msg.into())
    }

    /// Process exit code: 2 config, 3 data, 4 numeric, 5 frozen-violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            VistaError::Config(_) => 2,
            VistaError::Data(_)
            | VistaError::Format { .. }
            | VistaError::Io(_)
            | VistaError::Json(_)
            | VistaError::Sequencing(_) => 3,
            VistaError::Numeric(_) | VistaError::Dimension(_) | VistaError::EmptyContext(_) => 4,
            VistaError::FrozenViolation(_) => 5,
        }
    }
}
