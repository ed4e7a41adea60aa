use std::path::PathBuf;

use mlab_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid missingness spec: {0}")]
    InvalidSpec(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("mask optimization diverged at step {step}")]
    MaskDiverged { step: usize },
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("partition mismatch: {0}")]
    PartitionMismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported weight file version {0}")]
    Version(u32),
    #[error("weight file truncated while reading {0}")]
    Truncated(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
