use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum PaitsError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl PaitsError {
    pub fn config(msg: impl Into<String>) -> Self {
        PaitsError::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        PaitsError::Data(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        PaitsError::Shape(msg.into())
    }
}
