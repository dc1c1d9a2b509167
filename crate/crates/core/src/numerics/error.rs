use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("usage: {0}")]
    Usage(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NumericsError::Shape { op, detail: detail.into() }
    }
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
