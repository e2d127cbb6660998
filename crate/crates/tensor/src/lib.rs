//! Dense row-major 2-D tensors and a tape-based reverse-mode differentiation
//! engine sized for small transformer models on a CPU.
//!
//! Values are `f64` throughout. Every tensor is a matrix; vectors are `1 × d`
//! and scalars are `1 × 1`. Batches are represented by stacking rows, and the
//! fused [`Graph::attention`] op takes an explicit segment layout so that many
//! independent sequences can share one node.

mod error;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{AttnMask, AttnSegment, Grads, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Epsilon added to the row norm in [`Graph::l2_normalize_rows`].
pub const NORMALIZE_EPS: f64 = 1e-12;
/// Variance epsilon used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;
