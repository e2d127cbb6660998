//! Vision-tactile-language alignment on a small autograd engine.

pub mod checks;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
mod error;
pub mod eval;
pub mod image;
pub mod lora;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod qformer;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use image::ImageObs;
pub use vtl_tensor as tensor;
