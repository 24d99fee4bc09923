//! Forward and backward kernels on plain tensors. The tape in [`super::tape`]
//! records calls to these and replays the backward halves.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Enabled spatial locations per sample, as flat `y * W + x` indices.
///
/// `None` in the kernels below means every location is enabled.
pub type Worklist = Vec<Vec<usize>>;

/// Checks conv shapes and returns `(c_in / groups, c_out / groups)`.
pub fn check_conv(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    groups: usize,
) -> Result<(usize, usize)> {
    let [_, cin, _, _] = input.shape();
    let [cout, wcin, kh, kw] = weight.shape();
    if groups == 0 {
        return invalid("conv2d", "groups must be positive");
    }
    if cin % groups != 0 {
        return shape_err("conv2d", format!("input channels {cin} not divisible by groups {groups}"));
    }
    if cout % groups != 0 {
        return shape_err("conv2d", format!("output channels {cout} not divisible by groups {groups}"));
    }
    if (kh, kw) != (3, 3) {
        return shape_err("conv2d", format!("kernel must be 3x3, got {kh}x{kw}"));
    }
    if wcin != cin / groups {
        return shape_err(
            "conv2d",
            format!("weight in-channels {wcin} != input channels {cin} / groups {groups}"),
        );
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return shape_err("conv2d", format!("bias length {} != out channels {cout}", b.len()));
        }
    }
    Ok((cin / groups, cout / groups))
}

/// Gathers the 3x3 zero-padded neighbourhoods of `locs` into `cols`,
/// laid out `[cin_g * 9, locs.len()]` row-major.
fn im2col(
    plane_data: &[f64],
    cin_g: usize,
    h: usize,
    w: usize,
    locs: &[usize],
    cols: &mut [f64],
) {
    let n = locs.len();
    let hw = h * w;
    for ci in 0..cin_g {
        let src = &plane_data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * n;
                let dst = &mut cols[row..row + n];
                for (j, &loc) in locs.iter().enumerate() {
                    let y = (loc / w) as isize + ky as isize - 1;
                    let x = (loc % w) as isize + kx as isize - 1;
                    dst[j] = if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                        src[y as usize * w + x as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

fn col2im_add(
    cols: &[f64],
    cin_g: usize,
    h: usize,
    w: usize,
    locs: &[usize],
    plane_grad: &mut [f64],
) {
    let n = locs.len();
    let hw = h * w;
    for ci in 0..cin_g {
        let dst = &mut plane_grad[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * n;
                let src = &cols[row..row + n];
                for (j, &loc) in locs.iter().enumerate() {
                    let y = (loc / w) as isize + ky as isize - 1;
                    let x = (loc % w) as isize + kx as isize - 1;
                    if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                        dst[y as usize * w + x as usize] += src[j];
                    }
                }
            }
        }
    }
}

/// `c[m, n] (+)= a[m, k] * b[k, n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    accumulate: bool,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every caller passes buffers sized for the given dims and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn all_locations(hw: usize) -> Vec<usize> {
    (0..hw).collect()
}

/// 3x3, stride 1, zero padding 1 cross-correlation evaluated only at the
/// locations in `active` (all locations when `None`). Outputs at skipped
/// locations are exactly 0. Returns the output and the multiply-accumulate
/// count per sample.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    groups: usize,
    active: Option<&Worklist>,
) -> Result<(Tensor, Vec<u64>)> {
    let (cin_g, cout_g) = check_conv(input, weight, bias, groups)?;
    let [batch, cin, h, w] = input.shape();
    let cout = weight.shape()[0];
    let hw = h * w;
    if let Some(a) = active {
        if a.len() != batch {
            return shape_err("conv2d", format!("worklist covers {} samples, batch is {batch}", a.len()));
        }
    }
    let k9 = cin_g * 9;
    let mut out = Tensor::zeros([batch, cout, h, w]);
    let mut macs = vec![0u64; batch];
    let full = all_locations(hw);
    let wdata = weight.data();
    let mut cols = Vec::new();
    let mut res = Vec::new();
    for n in 0..batch {
        let locs: &[usize] = match active {
            Some(a) => &a[n],
            None => &full,
        };
        let nl = locs.len();
        macs[n] = (nl * cout * k9) as u64;
        if nl == 0 {
            continue;
        }
        cols.resize(k9 * nl, 0.0);
        res.resize(cout_g * nl, 0.0);
        for g in 0..groups {
            let in_off = (n * cin + g * cin_g) * hw;
            im2col(&input.data()[in_off..in_off + cin_g * hw], cin_g, h, w, locs, &mut cols);
            let wg = &wdata[g * cout_g * k9..(g + 1) * cout_g * k9];
            gemm(cout_g, k9, nl, wg, k9 as isize, 1, &cols, nl as isize, 1, false, &mut res, nl as isize, 1);
            let od = out.data_mut();
            for o in 0..cout_g {
                let co = g * cout_g + o;
                let b = bias.map_or(0.0, |b| b.data()[co]);
                let base = (n * cout + co) * hw;
                let row = &res[o * nl..(o + 1) * nl];
                for (j, &loc) in locs.iter().enumerate() {
                    od[base + loc] = row[j] + b;
                }
            }
        }
    }
    Ok((out, macs))
}

/// Gradients of [`conv2d_forward`] given the output gradient. Only the
/// active locations propagate. Returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    groups: usize,
    active: Option<&Worklist>,
    grad_out: &Tensor,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [batch, cin, h, w] = input.shape();
    let cout = weight.shape()[0];
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let hw = h * w;
    let k9 = cin_g * 9;
    let mut d_in = need_input.then(|| Tensor::zeros(input.shape()));
    let mut d_w = Tensor::zeros(weight.shape());
    let mut d_b = Tensor::vector(vec![0.0; cout]);
    let full = all_locations(hw);
    let wdata = weight.data();
    let mut cols = Vec::new();
    let mut gsub = Vec::new();
    let mut dcols = Vec::new();
    for n in 0..batch {
        let locs: &[usize] = match active {
            Some(a) => &a[n],
            None => &full,
        };
        let nl = locs.len();
        if nl == 0 {
            continue;
        }
        cols.resize(k9 * nl, 0.0);
        gsub.resize(cout_g * nl, 0.0);
        dcols.resize(k9 * nl, 0.0);
        for g in 0..groups {
            for o in 0..cout_g {
                let co = g * cout_g + o;
                let base = (n * cout + co) * hw;
                let row = &mut gsub[o * nl..(o + 1) * nl];
                let gd = grad_out.data();
                let mut s = 0.0;
                for (j, &loc) in locs.iter().enumerate() {
                    row[j] = gd[base + loc];
                    s += row[j];
                }
                d_b.data_mut()[co] += s;
            }
            let in_off = (n * cin + g * cin_g) * hw;
            im2col(&input.data()[in_off..in_off + cin_g * hw], cin_g, h, w, locs, &mut cols);
            let dwg = &mut d_w.data_mut()[g * cout_g * k9..(g + 1) * cout_g * k9];
            // dW_g += G [cout_g, nl] * cols^T [nl, k9]
            gemm(cout_g, nl, k9, &gsub, nl as isize, 1, &cols, 1, nl as isize, true, dwg, k9 as isize, 1);
            if let Some(d_in) = d_in.as_mut() {
                let wg = &wdata[g * cout_g * k9..(g + 1) * cout_g * k9];
                // dcols [k9, nl] = W_g^T [k9, cout_g] * G [cout_g, nl]
                gemm(k9, cout_g, nl, wg, 1, k9 as isize, &gsub, nl as isize, 1, false, &mut dcols, nl as isize, 1);
                let dst = &mut d_in.data_mut()[in_off..in_off + cin_g * hw];
                col2im_add(&dcols, cin_g, h, w, locs, dst);
            }
        }
    }
    (d_in, d_w, d_b)
}

/// Saved statistics for the group-norm backward pass.
#[derive(Clone, Debug)]
pub struct GroupNormCache {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub fn check_group_norm(input: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<()> {
    let c = input.channels();
    if groups == 0 || c % groups != 0 {
        return shape_err("group_norm", format!("channels {c} not divisible by num_groups {groups}"));
    }
    if gamma.len() != c || beta.len() != c {
        return shape_err(
            "group_norm",
            format!("gamma/beta lengths {}/{} != channels {c}", gamma.len(), beta.len()),
        );
    }
    if !(eps > 0.0) {
        return invalid("group_norm", format!("eps must be positive, got {eps}"));
    }
    Ok(())
}

pub fn group_norm_forward(
    input: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, GroupNormCache)> {
    check_group_norm(input, groups, gamma, beta, eps)?;
    let [batch, c, h, w] = input.shape();
    let hw = h * w;
    let cpg = c / groups;
    let span = cpg * hw;
    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let mut rstd = vec![0.0; batch * groups];
    for n in 0..batch {
        for g in 0..groups {
            let off = (n * c + g * cpg) * hw;
            let x = &input.data()[off..off + span];
            let mean = x.iter().sum::<f64>() / span as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[n * groups + g] = r;
            let xh = &mut xhat.data_mut()[off..off + span];
            for (d, &v) in xh.iter_mut().zip(x) {
                *d = (v - mean) * r;
            }
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                let s = off + ci * hw;
                for i in 0..hw {
                    out.data_mut()[s + i] = xhat.data()[s + i] * ga + be;
                }
            }
        }
    }
    Ok((out, GroupNormCache { xhat, rstd }))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn group_norm_backward(
    groups: usize,
    gamma: &Tensor,
    cache: &GroupNormCache,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [batch, c, h, w] = grad_out.shape();
    let hw = h * w;
    let cpg = c / groups;
    let span = cpg * hw;
    let mut d_in = Tensor::zeros(grad_out.shape());
    let mut d_gamma = Tensor::vector(vec![0.0; c]);
    let mut d_beta = Tensor::vector(vec![0.0; c]);
    let xhat = cache.xhat.data();
    let dy = grad_out.data();
    let mut dxhat = vec![0.0; span];
    for n in 0..batch {
        for g in 0..groups {
            let off = (n * c + g * cpg) * hw;
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let ga = gamma.data()[ch];
                let s = off + ci * hw;
                let (mut sg, mut sb) = (0.0, 0.0);
                for i in 0..hw {
                    sg += dy[s + i] * xhat[s + i];
                    sb += dy[s + i];
                    dxhat[ci * hw + i] = dy[s + i] * ga;
                }
                d_gamma.data_mut()[ch] += sg;
                d_beta.data_mut()[ch] += sb;
            }
            let xh = &xhat[off..off + span];
            let m1 = dxhat.iter().sum::<f64>() / span as f64;
            let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / span as f64;
            let r = cache.rstd[n * groups + g];
            let dst = &mut d_in.data_mut()[off..off + span];
            for i in 0..span {
                dst[i] = r * (dxhat[i] - m1 - xh[i] * m2);
            }
        }
    }
    (d_in, d_gamma, d_beta)
}

/// Factor-2 resampling direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

/// Source taps `(i0, i1, w0, w1)` for align-corners-false bilinear
/// upsampling by 2 along one axis of length `len`.
fn up_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

pub fn resample_output_shape(shape: [usize; 4], dir: Direction) -> Result<[usize; 4]> {
    let [n, c, h, w] = shape;
    match dir {
        Direction::Up => Ok([n, c, 2 * h, 2 * w]),
        Direction::Down => {
            if h % 2 != 0 || w % 2 != 0 {
                return shape_err("bilinear_resample", format!("down needs even H and W, got {h}x{w}"));
            }
            Ok([n, c, h / 2, w / 2])
        }
    }
}

pub fn resample_forward(input: &Tensor, dir: Direction) -> Result<Tensor> {
    let oshape = resample_output_shape(input.shape(), dir)?;
    let [n, c, h, w] = input.shape();
    let [_, _, oh, ow] = oshape;
    let mut out = Tensor::zeros(oshape);
    let src = input.data();
    let dst = out.data_mut();
    match dir {
        Direction::Up => {
            let ty = up_taps(h);
            let tx = up_taps(w);
            for p in 0..n * c {
                let s = &src[p * h * w..(p + 1) * h * w];
                let d = &mut dst[p * oh * ow..(p + 1) * oh * ow];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        d[oy * ow + ox] = wy0 * (wx0 * s[y0 * w + x0] + wx1 * s[y0 * w + x1])
                            + wy1 * (wx0 * s[y1 * w + x0] + wx1 * s[y1 * w + x1]);
                    }
                }
            }
        }
        Direction::Down => {
            for p in 0..n * c {
                let s = &src[p * h * w..(p + 1) * h * w];
                let d = &mut dst[p * oh * ow..(p + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (y, x) = (2 * oy, 2 * ox);
                        d[oy * ow + ox] =
                            0.25 * (s[y * w + x] + s[y * w + x + 1] + s[(y + 1) * w + x] + s[(y + 1) * w + x + 1]);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn resample_backward(input_shape: [usize; 4], dir: Direction, grad_out: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let [_, _, oh, ow] = grad_out.shape();
    let mut d_in = Tensor::zeros(input_shape);
    let g = grad_out.data();
    let dst = d_in.data_mut();
    match dir {
        Direction::Up => {
            let ty = up_taps(h);
            let tx = up_taps(w);
            for p in 0..n * c {
                let gs = &g[p * oh * ow..(p + 1) * oh * ow];
                let d = &mut dst[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let v = gs[oy * ow + ox];
                        d[y0 * w + x0] += wy0 * wx0 * v;
                        d[y0 * w + x1] += wy0 * wx1 * v;
                        d[y1 * w + x0] += wy1 * wx0 * v;
                        d[y1 * w + x1] += wy1 * wx1 * v;
                    }
                }
            }
        }
        Direction::Down => {
            for p in 0..n * c {
                let gs = &g[p * oh * ow..(p + 1) * oh * ow];
                let d = &mut dst[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let v = 0.25 * gs[oy * ow + ox];
                        let (y, x) = (2 * oy, 2 * ox);
                        d[y * w + x] += v;
                        d[y * w + x + 1] += v;
                        d[(y + 1) * w + x] += v;
                        d[(y + 1) * w + x + 1] += v;
                    }
                }
            }
        }
    }
    d_in
}

/// One 3x3 stride-1 max pool over the valid window. Returns the output and
/// the flat source index of the first maximum in scan order per element.
pub fn max_pool3_forward(input: &Tensor) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros(input.shape());
    let mut arg = vec![0usize; input.len()];
    let src = input.data();
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut bi = base + y * w + x;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        let i = base + yy * w + xx;
                        if src[i] > best {
                            best = src[i];
                            bi = i;
                        }
                    }
                }
                out.data_mut()[base + y * w + x] = best;
                arg[base + y * w + x] = bi;
            }
        }
    }
    (out, arg)
}

pub fn max_pool3_backward(input_shape: [usize; 4], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut d_in = Tensor::zeros(input_shape);
    for (o, &src) in argmax.iter().enumerate() {
        d_in.data_mut()[src] += grad_out.data()[o];
    }
    d_in
}

/// Per-pixel weighted softmax cross-entropy summed and divided by `normalizer`.
/// Returns the loss and the softmax probabilities for backward.
pub fn softmax_xent_forward(
    logits: &Tensor,
    targets: &[usize],
    weights: &[f64],
    normalizer: f64,
) -> Result<(f64, Tensor)> {
    let [n, k, h, w] = logits.shape();
    let hw = h * w;
    if targets.len() != n * hw || weights.len() != n * hw {
        return shape_err(
            "softmax_xent",
            format!("targets/weights length {}/{} != {}", targets.len(), weights.len(), n * hw),
        );
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return invalid("softmax_xent", format!("target class {t} out of range for {k} logits"));
    }
    if !(normalizer > 0.0) {
        return invalid("softmax_xent", "normalizer must be positive");
    }
    let mut probs = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    let l = logits.data();
    for b in 0..n {
        for i in 0..hw {
            let at = |c: usize| (b * k + c) * hw + i;
            let mx = (0..k).map(|c| l[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (l[at(c)] - mx).exp()).sum();
            for c in 0..k {
                probs.data_mut()[at(c)] = (l[at(c)] - mx).exp() / z;
            }
            let t = targets[b * hw + i];
            let wgt = weights[b * hw + i];
            loss += wgt * (z.ln() + mx - l[at(t)]);
        }
    }
    Ok((loss / normalizer, probs))
}

pub fn softmax_xent_backward(
    probs: &Tensor,
    targets: &[usize],
    weights: &[f64],
    normalizer: f64,
    upstream: f64,
) -> Tensor {
    let [n, k, h, w] = probs.shape();
    let hw = h * w;
    let mut d = probs.clone();
    for b in 0..n {
        for i in 0..hw {
            let t = targets[b * hw + i];
            let s = weights[b * hw + i] * upstream / normalizer;
            for c in 0..k {
                let j = (b * k + c) * hw + i;
                let one = if c == t { 1.0 } else { 0.0 };
                d.data_mut()[j] = (probs.data()[j] - one) * s;
            }
        }
    }
    d
}

/// Smooth-L1 with transition `beta`, weighted per location and summed over
/// channels, divided by `normalizer`.
pub fn smooth_l1_forward(
    pred: &Tensor,
    target: &Tensor,
    weights: &[f64],
    beta: f64,
    normalizer: f64,
) -> Result<f64> {
    pred.expect_same_shape("smooth_l1", target)?;
    let [n, c, h, w] = pred.shape();
    let hw = h * w;
    if weights.len() != n * hw {
        return shape_err("smooth_l1", format!("weights length {} != {}", weights.len(), n * hw));
    }
    if !(beta > 0.0) || !(normalizer > 0.0) {
        return invalid("smooth_l1", "beta and normalizer must be positive");
    }
    let mut s = 0.0;
    for b in 0..n {
        for ch in 0..c {
            for i in 0..hw {
                let wgt = weights[b * hw + i];
                if wgt == 0.0 {
                    continue;
                }
                let j = (b * c + ch) * hw + i;
                let d = (pred.data()[j] - target.data()[j]).abs();
                s += wgt * if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
            }
        }
    }
    Ok(s / normalizer)
}

pub fn smooth_l1_backward(
    pred: &Tensor,
    target: &Tensor,
    weights: &[f64],
    beta: f64,
    normalizer: f64,
    upstream: f64,
) -> Tensor {
    let [n, c, h, w] = pred.shape();
    let hw = h * w;
    let mut g = Tensor::zeros(pred.shape());
    for b in 0..n {
        for ch in 0..c {
            for i in 0..hw {
                let wgt = weights[b * hw + i];
                if wgt == 0.0 {
                    continue;
                }
                let j = (b * c + ch) * hw + i;
                let d = pred.data()[j] - target.data()[j];
                let dd = if d.abs() < beta { d / beta } else { d.signum() };
                g.data_mut()[j] = wgt * dd * upstream / normalizer;
            }
        }
    }
    g
}
