//! Independent oracles and finite-difference helpers shared by the
//! integration tests. Nothing here calls the kernels it checks.
#![allow(dead_code)]

use std::sync::Arc;

use dynhead::autodiff::{ParameterSet, Tape, Var};
use dynhead::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod grad;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct nested-loop 3x3/pad 1/stride 1 grouped cross-correlation.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, groups: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let cout = w.shape()[0];
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = Tensor::zeros([n, cout, h, wd]);
    for b_ in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin_g {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += w.at(co, ci, ky, kx) * x.at(b_, g * cin_g + ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(b_, co, y, xx, acc);
                }
            }
        }
    }
    out
}

/// Naive sparse conv with an instrumented MAC counter.
pub fn naive_sparse_conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    groups: usize,
    mask: &Tensor,
) -> (Tensor, u64) {
    let [n, cin, h, wd] = x.shape();
    let cout = w.shape()[0];
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = Tensor::zeros([n, cout, h, wd]);
    let mut macs = 0u64;
    for b_ in 0..n {
        for y in 0..h {
            for xx in 0..wd {
                if mask.at(b_, 0, y, xx) == 0.0 {
                    continue;
                }
                for co in 0..cout {
                    let g = co / cout_g;
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin_g {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                macs += 1;
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += w.at(co, ci, ky, kx) * x.at(b_, g * cin_g + ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(b_, co, y, xx, acc);
                }
            }
        }
    }
    (out, macs)
}

/// Max over the `(2r+1)^2` window clipped at the borders.
pub fn window_max(x: &Tensor, r: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut m = f64::NEG_INFINITY;
                    for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                        for xq in xx.saturating_sub(r)..=(xx + r).min(w - 1) {
                            m = m.max(x.at(b, ch, yy, xq));
                        }
                    }
                    out.set(b, ch, y, xx, m);
                }
            }
        }
    }
    out
}

/// Align-corners-false linear interpolation of a 1-D signal at output
/// index `o` for upsampling factor 2.
pub fn interp_up(signal: &[f64], o: usize) -> f64 {
    let l = signal.len();
    let src = (o as f64 + 0.5) * 0.5 - 0.5;
    let src = if src < 0.0 { 0.0 } else { src };
    let lo = src.floor() as usize;
    let hi = if lo + 1 < l { lo + 1 } else { l - 1 };
    let lo = lo.min(l - 1);
    let t = src - lo as f64;
    signal[lo] * (1.0 - t) + signal[hi] * t
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, p: f64) -> Tensor {
    let mut m = Tensor::zeros([n, 1, h, w]);
    for v in m.data_mut() {
        *v = if rng.random_bool(p) { 1.0 } else { 0.0 };
    }
    m
}

/// Quadratic probe `Σ (y − t)² / 2` against a fixed random target, so
/// every output element gets a distinct upstream gradient.
pub fn probe(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let t = tape.value(y);
    let shape = t.shape();
    let mut r = rng(seed);
    let target = Tensor::randn(shape, 1.0, &mut r);
    let weights = vec![1.0; shape[0] * shape[2] * shape[3]];
    tape.smooth_l1(y, Arc::new(target), Arc::new(weights), 1e6, 1e-6).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central difference of `f` w.r.t. one scalar of parameter `name`.
pub fn fd(f: &dyn Fn(&ParameterSet) -> f64, params: &ParameterSet, name: &str, idx: usize, h: f64) -> f64 {
    let base = params.get(name).unwrap().clone();
    let mut p = params.clone();
    let mut plus = base.clone();
    plus.data_mut()[idx] += h;
    p.set(name, plus).unwrap();
    let fp = f(&p);
    let mut minus = base;
    minus.data_mut()[idx] -= h;
    p.set(name, minus).unwrap();
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

/// Checks analytic gradients of every parameter scalar (or a random subset
/// of `max_per_param` per tensor) against central differences.
/// Returns the worst relative error and a description of where.
pub fn grad_check(
    f: &dyn Fn(&ParameterSet) -> f64,
    grads: &std::collections::BTreeMap<String, Tensor>,
    params: &ParameterSet,
    max_per_param: usize,
    seed: u64,
) -> (f64, String) {
    let mut r = rng(seed);
    let mut worst = (0.0, String::new());
    for (name, t) in params.iter() {
        let idxs: Vec<usize> = if t.len() <= max_per_param {
            (0..t.len()).collect()
        } else {
            (0..max_per_param).map(|_| r.random_range(0..t.len())).collect()
        };
        for i in idxs {
            let num = fd(f, params, name, i, 1e-5);
            let an = grads[name].data()[i];
            let e = rel_err(an, num);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]: analytic {an:e} vs numeric {num:e}"));
            }
        }
    }
    worst
}

/// Group norm straight from the definition: per sample and group, subtract
/// the mean, divide by `sqrt(var + eps)` (biased variance), then scale/shift.
pub fn naive_group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let [n, c, h, w] = x.shape();
    let cg = c / groups;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for g in 0..groups {
            let mut vals = Vec::new();
            for ch in g * cg..(g + 1) * cg {
                for y in 0..h {
                    for xx in 0..w {
                        vals.push(x.at(b, ch, y, xx));
                    }
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            for ch in g * cg..(g + 1) * cg {
                for y in 0..h {
                    for xx in 0..w {
                        let v = (x.at(b, ch, y, xx) - mean) / (var + eps).sqrt();
                        out.set(b, ch, y, xx, v * gamma.data()[ch] + beta.data()[ch]);
                    }
                }
            }
        }
    }
    out
}
