//! Tensor-in, tensor-out forms of the tape operations.

use crate::autodiff::kernels;
pub use crate::autodiff::kernels::Direction;
use crate::autodiff::Tape;
use crate::error::Result;
use crate::tensor::Tensor;

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, groups: usize) -> Result<Tensor> {
    Ok(kernels::conv2d_forward(input, weight, bias, groups, None)?.0)
}

pub fn group_norm(input: &Tensor, num_groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(kernels::group_norm_forward(input, num_groups, gamma, beta, eps)?.0)
}

pub fn bilinear_resample(input: &Tensor, dir: Direction) -> Result<Tensor> {
    kernels::resample_forward(input, dir)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

pub fn mul_map(features: &Tensor, map: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let m = tape.constant(map.clone());
    let y = tape.mul_map(x, m)?;
    Ok(tape.value(y).clone())
}

pub fn max_pool_3x3_stride1(input: &Tensor, repeats: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = tape.max_pool_3x3_stride1(x, repeats)?;
    Ok(tape.value(y).clone())
}
