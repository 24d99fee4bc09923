//! Fine-grained dynamic detection head.
//!
//! Every router in the head gates each of its paths per pixel with a
//! spatial gate, runs the enabled paths as spatially sparse convolutions,
//! and exposes a differentiable compute budget so training can trade
//! accuracy against executed multiply-accumulates.

pub mod autodiff;
pub mod budget;
pub mod error;
pub mod gates;
pub mod harness;
pub mod head;
pub mod ops;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
