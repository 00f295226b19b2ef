use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (limit {limit})")]
    Index {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("{op}: degenerate input ({detail})")]
    Degenerate { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("non-finite value in {what} at flat index {index}")]
    NonFinite { what: String, index: usize },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
