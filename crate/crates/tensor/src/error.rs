use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: argument outside the domain ({value})")]
    Domain { op: &'static str, value: f64 },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape has already been consumed by backward")]
    TapeConsumed,
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;
