use thiserror::Error;
use vtl_tensor::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("category `{category}` has {available} training rows, {k}-shot sampling needs {k}")]
    Availability {
        category: String,
        k: usize,
        available: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("sequence of {len} positions exceeds the {max}-token limit")]
    Length { len: usize, max: usize },
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("non-finite loss at step {step} (batch rows {rows:?})")]
    NonFiniteLoss { step: usize, rows: Vec<u64> },
    #[error("gradient check failed: worst relative error {worst:e}")]
    GradCheck { worst: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }
}
