use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("index error: {0}")]
    Index(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Dimension { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
