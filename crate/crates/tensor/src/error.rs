use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: [usize; 2], reason: String },
    #[error("non-finite value encountered in {op}")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range for {op} (extent {extent})")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("forward pass is not deterministic: {first:e} vs {second:e}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
