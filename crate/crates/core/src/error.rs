use dsv_autograd::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("unknown parameter {0:?} in mask")]
    UnknownParameter(String),
    #[error("parameter mask selects nothing")]
    EmptyMask,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("augmentation {aug} does not apply to {what}")]
    Augmentation { aug: String, what: String },
    #[error("no alive candidates")]
    NoAliveCandidates,
    #[error("every candidate of class {0} was removed")]
    ClassExtinct(usize),
    #[error("class {0} has no candidate")]
    MissingClass(usize),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("hard-margin problem infeasible: {capped} multipliers hit the cap {cap:e}")]
    Infeasible { capped: usize, cap: f64 },
    #[error("not converged after {0} iterations")]
    NotConverged(usize),
    #[error("{0}")]
    Undefined(String),
}

impl Error {
    /// Short kebab-case code used in machine-readable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::ShapeMismatch { .. }) | Error::ShapeMismatch(_) => "shape-mismatch",
            Error::Tensor(TensorError::NonFinite { .. }) | Error::NonFinite(_) => "non-finite",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::BadMagic { .. } => "bad-magic",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::Truncated(_) => "truncated",
            Error::Malformed(_) => "malformed",
            Error::CountMismatch { .. } => "count-mismatch",
            Error::UnknownParameter(_) => "unknown-parameter",
            Error::EmptyMask => "empty-mask",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::Augmentation { .. } => "augmentation",
            Error::NoAliveCandidates => "no-alive-candidates",
            Error::ClassExtinct(_) => "class-extinct",
            Error::MissingClass(_) => "missing-class",
            Error::Infeasible { .. } => "infeasible",
            Error::NotConverged(_) => "not-converged",
            Error::Undefined(_) => "undefined",
        }
    }
}
