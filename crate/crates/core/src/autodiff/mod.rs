//! Dense tensor kernels and the reverse-mode tape built on them.

pub mod checkpoint;
pub mod kernels;
pub mod params;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use kernels::{Direction, Worklist};
pub use params::{clip_grad_norm, grad_norm, Gradients, ParameterSet, SgdConfig};
pub use tape::{Grads, MacTag, Tape, Var};
