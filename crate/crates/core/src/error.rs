use mgca_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MgcaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },
    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MgcaError> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> MgcaError {
    MgcaError::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> MgcaError {
    MgcaError::Config(msg.into())
}
