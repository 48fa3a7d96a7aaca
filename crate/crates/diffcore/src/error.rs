use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("variance must be strictly positive, found {0}")]
    NonPositiveVariance(f64),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
