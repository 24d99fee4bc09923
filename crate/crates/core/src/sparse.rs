//! Spatial masks and the spatially sparse 3x3 convolution.
//!
//! A gate map is dilated by the receptive field of the path it controls
//! (one 3x3 stride-1 max pool per stacked conv), then every positive entry
//! is quantized to one. The sparse conv gathers the enabled coordinates into
//! a per-sample worklist and evaluates dense 3x3 dot products only there.

use std::sync::Arc;

use crate::autodiff::kernels::{self, Worklist};
use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::head::graph::{NodeId, PathKind};
use crate::tensor::Tensor;

/// Binary enablement map, shape `[batch, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMask {
    batch: usize,
    height: usize,
    width: usize,
    bits: Vec<bool>,
    pub provenance: Option<(NodeId, PathKind)>,
}

impl SpatialMask {
    pub fn full(batch: usize, height: usize, width: usize) -> Self {
        SpatialMask { batch, height, width, bits: vec![true; batch * height * width], provenance: None }
    }

    pub fn empty(batch: usize, height: usize, width: usize) -> Self {
        SpatialMask { batch, height, width, bits: vec![false; batch * height * width], provenance: None }
    }

    /// Builds a mask from a one-channel tensor; entries must be 0 or 1.
    pub fn from_binary(t: &Tensor) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if c != 1 {
            return shape_err("SpatialMask", format!("expected one channel, got {c}"));
        }
        let mut bits = Vec::with_capacity(t.len());
        for &v in t.data() {
            match v {
                0.0 => bits.push(false),
                1.0 => bits.push(true),
                _ => return invalid("SpatialMask", format!("mask entry {v} is not 0 or 1")),
            }
        }
        Ok(SpatialMask { batch: n, height: h, width: w, bits, provenance: None })
    }

    pub fn with_provenance(mut self, node: NodeId, path: PathKind) -> Self {
        self.provenance = Some((node, path));
        self
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, 1, self.height, self.width]
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> bool {
        self.bits[(n * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, n: usize, y: usize, x: usize, on: bool) {
        self.bits[(n * self.height + y) * self.width + x] = on;
    }

    pub fn enabled(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Enabled locations of sample `n`.
    pub fn enabled_in(&self, n: usize) -> usize {
        let hw = self.height * self.width;
        self.bits[n * hw..(n + 1) * hw].iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        self.enabled() as f64 / self.bits.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape(), self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .expect("mask shape")
    }

    /// Per-sample lists of enabled flat locations, in scan order.
    pub fn worklist(&self) -> Worklist {
        let hw = self.height * self.width;
        (0..self.batch)
            .map(|n| (0..hw).filter(|&i| self.bits[n * hw + i]).collect())
            .collect()
    }
}

/// Receptive-field dilation of a gate map for a path of `conv_depth`
/// stacked 3x3 convs, recorded on the tape so the budget can differentiate
/// through it.
pub fn dilate(tape: &mut Tape, m: Var, conv_depth: usize) -> Result<Var> {
    if conv_depth == 0 {
        return invalid("dilate_mask", "conv_depth must be at least 1");
    }
    tape.max_pool_3x3_stride1(m, conv_depth)
}

/// Tensor-level [`dilate`].
pub fn dilate_mask(m: &Tensor, conv_depth: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(m.clone());
    let d = dilate(&mut tape, v, conv_depth)?;
    Ok(tape.value(d).clone())
}

/// Strictly positive entries become 1, zeros stay 0.
pub fn quantize_mask(dilated: &Tensor) -> Result<SpatialMask> {
    if let Some(v) = dilated.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("quantize_mask: entry {v}")));
    }
    if let Some(v) = dilated.data().iter().find(|v| **v < 0.0) {
        return invalid("quantize_mask", format!("negative entry {v}"));
    }
    SpatialMask::from_binary(&dilated.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

pub(crate) fn check_mask(input: &Tensor, mask: &SpatialMask) -> Result<()> {
    let [n, _, h, w] = input.shape();
    if mask.shape() != [n, 1, h, w] {
        return shape_err(
            "sparse_conv2d",
            format!("mask {:?} does not match input resolution {:?}", mask.shape(), input.shape()),
        );
    }
    Ok(())
}

/// Sparse conv recorded on the tape. Outputs at disabled locations are 0.
pub fn sparse_conv(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Option<Var>,
    groups: usize,
    mask: &SpatialMask,
) -> Result<Var> {
    check_mask(tape.value(x), mask)?;
    tape.conv2d_active(x, w, b, groups, Some(Arc::new(mask.worklist())))
}

/// Tensor-level sparse conv; also returns the executed MACs per sample.
pub fn sparse_conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    groups: usize,
    mask: &SpatialMask,
) -> Result<(Tensor, Vec<u64>)> {
    check_mask(input, mask)?;
    kernels::conv2d_forward(input, weight, bias, groups, Some(&mask.worklist()))
}

/// Multiply-accumulates per enabled location for a 3x3 conv weight.
pub fn macs_per_location(weight_shape: [usize; 4], groups: usize) -> u64 {
    let [cout, cin_g, kh, kw] = weight_shape;
    debug_assert!(groups > 0);
    (cout * cin_g * kh * kw) as u64
}

pub fn count_sparse_macs(weight_shape: [usize; 4], groups: usize, mask: &SpatialMask) -> u64 {
    mask.enabled() as u64 * macs_per_location(weight_shape, groups)
}

pub fn count_dense_macs(weight_shape: [usize; 4], groups: usize, batch: usize, height: usize, width: usize) -> u64 {
    (batch * height * width) as u64 * macs_per_location(weight_shape, groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::kernels::conv2d_forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, p: f64) -> SpatialMask {
        let mut m = SpatialMask::empty(n, h, w);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    m.set(b, y, x, rng.random_bool(p));
                }
            }
        }
        m
    }

    #[test]
    fn quantize_thresholds_at_zero() {
        let t = Tensor::new([1, 1, 1, 3], vec![0.0, 1e-9, 0.7]).unwrap();
        let m = quantize_mask(&t).unwrap();
        assert_eq!(m.to_tensor().data(), &[0.0, 1.0, 1.0]);
        assert!(quantize_mask(&Tensor::full([1, 1, 2, 2], 0.3)).unwrap().is_full());
        assert!(quantize_mask(&Tensor::zeros([1, 1, 2, 2])).unwrap().is_empty());
        assert!(quantize_mask(&Tensor::full([1, 1, 2, 2], -0.1)).is_err());
    }

    #[test]
    fn dilation_of_single_pixel() {
        let mut m = Tensor::zeros([1, 1, 7, 7]);
        m.set(0, 0, 3, 3, 0.4);
        let d = dilate_mask(&m, 1).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                let inside = (2..=4).contains(&y) && (2..=4).contains(&x);
                assert_eq!(d.at(0, 0, y, x), if inside { 0.4 } else { 0.0 });
            }
        }
        assert!(dilate_mask(&Tensor::zeros([1, 1, 5, 5]), 2).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(dilate_mask(&m, 0).is_err());
    }

    #[test]
    fn full_mask_is_bitwise_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn([2, 4, 6, 5], 1.0, &mut rng);
        let w = Tensor::randn([4, 4, 3, 3], 0.5, &mut rng);
        let b = Tensor::randn([4, 1, 1, 1], 0.5, &mut rng);
        let (dense, _) = conv2d_forward(&x, &w, Some(&b), 1, None).unwrap();
        let (sparse, macs) = sparse_conv2d(&x, &w, Some(&b), 1, &SpatialMask::full(2, 6, 5)).unwrap();
        assert_eq!(dense.data(), sparse.data());
        assert_eq!(macs, vec![30 * 4 * 4 * 9; 2]);
    }

    #[test]
    fn empty_mask_does_no_work() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn([1, 2, 4, 4], 1.0, &mut rng);
        let w = Tensor::randn([2, 1, 3, 3], 0.5, &mut rng);
        let b = Tensor::vector(vec![1.0, 2.0]);
        let m = SpatialMask::empty(1, 4, 4);
        let (y, macs) = sparse_conv2d(&x, &w, Some(&b), 2, &m).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(macs, vec![0]);
        assert_eq!(count_sparse_macs(w.shape(), 2, &m), 0);
    }

    #[test]
    fn mac_formula_at_full_density() {
        let m = SpatialMask::full(1, 6, 7);
        assert_eq!(count_sparse_macs([8, 8, 3, 3], 1, &m), 6 * 7 * 8 * 8 * 9);
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([2, 2, 3, 3]);
        assert!(sparse_conv2d(&x, &w, None, 1, &SpatialMask::full(1, 4, 5)).is_err());
        assert!(sparse_conv2d(&x, &w, None, 1, &SpatialMask::full(2, 4, 4)).is_err());
    }

    #[test]
    fn dilation_is_monotone_in_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = random_mask(&mut rng, 1, 9, 9, 0.05).to_tensor();
            let mut prev = quantize_mask(&m).unwrap().density();
            for d in 1..5 {
                let cur = quantize_mask(&dilate_mask(&m, d).unwrap()).unwrap().density();
                assert!(cur >= prev);
                prev = cur;
            }
        }
    }

    #[test]
    fn dilated_mask_covers_gate_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_mask(&mut rng, 2, 8, 8, 0.1).to_tensor().map(|v| v * 0.37);
        let q = quantize_mask(&dilate_mask(&m, 2).unwrap()).unwrap();
        for n in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    if m.at(n, 0, y, x) > 0.0 {
                        assert!(q.get(n, y, x));
                    }
                }
            }
        }
    }
}
