use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {got} were supplied")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("gradient output must be a scalar, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("leaf not in graph")]
    LeafNotInGraph,
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}
