use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlktError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AlktError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        AlktError::Invalid(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        AlktError::Parse(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, AlktError>;
