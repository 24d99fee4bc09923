//! Operation tape with reverse-mode replay.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, Direction, GroupNormCache, Worklist};
use super::params::{Gradients, ParameterSet};
use crate::error::{invalid, shape_err, Error, Result};
use crate::gates;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u64,
}

/// Buckets for executed multiply-accumulate counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MacTag {
    Backbone,
    Gate,
    Path,
    Predict,
    Other,
}

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, groups: usize, active: Option<Arc<Worklist>> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, cache: GroupNormCache },
    Resample { x: Var, dir: Direction },
    Relu { x: Var },
    Add { a: Var, b: Var },
    MulMap { x: Var, m: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    GateAct { x: Var, tau: f64 },
    SpatialMean { x: Var },
    Concat { xs: Vec<Var> },
    Channel { x: Var, c: usize },
    SoftmaxChannels { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Linear { terms: Vec<(Var, f64)> },
    DivScalar { x: Var, d: f64 },
    Xent { logits: Var, targets: Arc<Vec<usize>>, weights: Arc<Vec<f64>>, normalizer: f64, probs: Tensor },
    SmoothL1 { pred: Var, target: Arc<Tensor>, weights: Arc<Vec<f64>>, beta: f64, normalizer: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by tape variable.
pub struct Grads {
    tape: u64,
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.by_node.get(v.idx).and_then(|g| g.as_ref())
    }
}

/// Records forward operations in execution order; `backward` replays them
/// in reverse. Inputs always precede outputs on the tape.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    mac_tag: MacTag,
    macs: BTreeMap<MacTag, Vec<u64>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            mac_tag: MacTag::Other,
            macs: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { idx: self.nodes.len() - 1, tape: self.id }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(())
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.idx].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    /// A leaf value. `requires_grad` leaves receive gradients in [`Grads`].
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Loads a named parameter; repeated loads return the same variable.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::KeyMismatch(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.leaf(t, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn set_mac_tag(&mut self, tag: MacTag) -> MacTag {
        std::mem::replace(&mut self.mac_tag, tag)
    }

    /// Executed multiply-accumulates per sample for one bucket.
    pub fn macs(&self, tag: MacTag) -> Vec<u64> {
        self.macs.get(&tag).cloned().unwrap_or_default()
    }

    fn count_macs(&mut self, per_sample: &[u64]) {
        let e = self.macs.entry(self.mac_tag).or_default();
        if e.len() < per_sample.len() {
            e.resize(per_sample.len(), 0);
        }
        for (a, b) in e.iter_mut().zip(per_sample) {
            *a += b;
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        self.conv2d_active(x, w, b, groups, None)
    }

    /// Convolution evaluated only at the per-sample worklist locations.
    pub fn conv2d_active(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
        active: Option<Arc<Worklist>>,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let (out, macs) = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            groups,
            active.as_deref(),
        )?;
        self.count_macs(&macs);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv { x, w, b, groups, active }, ng))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        for v in [x, gamma, beta] {
            self.check(v)?;
        }
        let (out, cache) =
            kernels::group_norm_forward(self.value(x), groups, self.value(gamma), self.value(beta), eps)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, cache }, ng))
    }

    pub fn resample(&mut self, x: Var, dir: Direction) -> Result<Var> {
        self.check(x)?;
        let out = kernels::resample_forward(self.value(x), dir)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Resample { x, dir }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        Ok(self.push(out, Op::Relu { x }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    /// Left-to-right sum of same-shaped values.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = xs.split_first() else {
            return invalid("add_all", "empty input list");
        };
        self.check(first)?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Scales every channel at each location by a one-channel map.
    pub fn mul_map(&mut self, x: Var, m: Var) -> Result<Var> {
        self.check(x)?;
        self.check(m)?;
        let (xt, mt) = (self.value(x), self.value(m));
        let [n, c, h, w] = xt.shape();
        if mt.shape() != [n, 1, h, w] {
            return shape_err("mul_map", format!("map {:?} does not broadcast over {:?}", mt.shape(), xt.shape()));
        }
        let hw = h * w;
        let mut out = xt.clone();
        for b in 0..n {
            let mm = &mt.data()[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let o = &mut out.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (v, &g) in o.iter_mut().zip(mm) {
                    *v *= g;
                }
            }
        }
        let ng = self.ng(x) || self.ng(m);
        Ok(self.push(out, Op::MulMap { x, m }, ng))
    }

    /// One 3x3 stride-1 max pool with border windows clipped.
    pub fn max_pool3(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (out, argmax) = kernels::max_pool3_forward(self.value(x));
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, ng))
    }

    /// `repeats` successive 3x3 stride-1 max pools.
    pub fn max_pool_3x3_stride1(&mut self, x: Var, repeats: usize) -> Result<Var> {
        if repeats == 0 {
            return invalid("max_pool_3x3_stride1", "repeats must be at least 1");
        }
        (0..repeats).try_fold(x, |acc, _| self.max_pool3(acc))
    }

    pub fn gate_activation(&mut self, x: Var, tau: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| gates::delta(v, tau));
        let ng = self.ng(x);
        Ok(self.push(out, Op::GateAct { x, tau }, ng))
    }

    /// Replaces every plane by its spatial mean (global average pooling,
    /// broadcast back to the input resolution).
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xt = self.value(x);
        let hw = xt.plane();
        let mut out = xt.clone();
        for p in out.data_mut().chunks_mut(hw) {
            let m = p.iter().sum::<f64>() / hw as f64;
            p.iter_mut().for_each(|v| *v = m);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SpatialMean { x }, ng))
    }

    /// Concatenates along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return invalid("concat_channels", "empty input list");
        };
        for &x in xs {
            self.check(x)?;
        }
        let [n, _, h, w] = self.value(first).shape();
        let mut c_total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s[0] != n || s[2] != h || s[3] != w {
                return shape_err("concat_channels", format!("{s:?} vs {:?}", self.value(first).shape()));
            }
            c_total += s[1];
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c_total * hw);
        for b in 0..n {
            for &x in xs {
                let t = self.value(x);
                let c = t.channels();
                data.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let out = Tensor::new([n, c_total, h, w], data)?;
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, ng))
    }

    /// Channel `c` as a one-channel tensor.
    pub fn channel(&mut self, x: Var, c: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let [n, ch, h, w] = t.shape();
        if c >= ch {
            return shape_err("channel", format!("channel {c} out of range for {ch}"));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * hw);
        for b in 0..n {
            data.extend_from_slice(&t.data()[(b * ch + c) * hw..(b * ch + c + 1) * hw]);
        }
        let out = Tensor::new([n, 1, h, w], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Channel { x, c }, ng))
    }

    /// Softmax across channels at every location.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let hw = h * w;
        let mut out = t.clone();
        for b in 0..n {
            for i in 0..hw {
                let at = |k: usize| (b * c + k) * hw + i;
                let mx = (0..c).map(|k| t.data()[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|k| (t.data()[at(k)] - mx).exp()).sum();
                for k in 0..c {
                    out.data_mut()[at(k)] = (t.data()[at(k)] - mx).exp() / z;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SoftmaxChannels { x }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        Ok(self.push(out, Op::Sum { x }, ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(x);
        Ok(self.push(out, Op::Mean { x }, ng))
    }

    /// Element-wise `x / d` for a finite non-zero constant `d`.
    pub fn div_scalar(&mut self, x: Var, d: f64) -> Result<Var> {
        self.check(x)?;
        if !d.is_finite() || d == 0.0 {
            return invalid("div_scalar", format!("divisor {d} must be finite and non-zero"));
        }
        let out = self.value(x).map(|v| v / d);
        let ng = self.ng(x);
        Ok(self.push(out, Op::DivScalar { x, d }, ng))
    }

    /// `Σ coef · term` over scalar terms.
    pub fn linear(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, k) in terms {
            self.check(v)?;
            if self.value(v).len() != 1 {
                return shape_err("linear", format!("term {:?} is not a scalar", self.value(v).shape()));
            }
            s += k * self.value(v).item();
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(Tensor::scalar(s), Op::Linear { terms: terms.to_vec() }, ng))
    }

    pub fn softmax_xent(
        &mut self,
        logits: Var,
        targets: Arc<Vec<usize>>,
        weights: Arc<Vec<f64>>,
        normalizer: f64,
    ) -> Result<Var> {
        self.check(logits)?;
        let (loss, probs) = kernels::softmax_xent_forward(self.value(logits), &targets, &weights, normalizer)?;
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss), Op::Xent { logits, targets, weights, normalizer, probs }, ng))
    }

    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: Arc<Tensor>,
        weights: Arc<Vec<f64>>,
        beta: f64,
        normalizer: f64,
    ) -> Result<Var> {
        self.check(pred)?;
        let loss = kernels::smooth_l1_forward(self.value(pred), &target, &weights, beta, normalizer)?;
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(loss), Op::SmoothL1 { pred, target, weights, beta, normalizer }, ng))
    }

    /// Reverse replay from a scalar `loss`.
    pub fn backward_vars(&self, loss: Var) -> Result<Grads> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.idx).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { tape: self.id, by_node: grads })
    }

    /// Gradients for every parameter in `params`; parameters the loss does
    /// not reach get zeros.
    pub fn backward(&self, loss: Var, params: &ParameterSet) -> Result<Gradients> {
        let grads = self.backward_vars(loss)?;
        let mut out = Gradients::default();
        for (name, t) in params.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|&v| grads.wrt(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.clone(), g);
        }
        if let Some(name) = self.params.keys().find(|k| params.get(k).is_none()) {
            return Err(Error::KeyMismatch(format!("tape parameter `{name}` missing from parameter set")));
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, d: Tensor| {
            if !self.nodes[v.idx].needs_grad {
                return;
            }
            match &mut grads[v.idx] {
                Some(e) => e.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, groups, active } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    *groups,
                    active.as_deref(),
                    g,
                    self.ng(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    let shape = self.value(*b).shape();
                    acc(*b, Tensor::new(shape, db.into_data()).expect("bias shape"));
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, cache } => {
                let (dx, dg, db) = kernels::group_norm_backward(*groups, self.value(*gamma), cache, g);
                acc(*x, dx);
                let gs = self.value(*gamma).shape();
                let bs = self.value(*beta).shape();
                acc(*gamma, Tensor::new(gs, dg.into_data()).expect("gamma shape"));
                acc(*beta, Tensor::new(bs, db.into_data()).expect("beta shape"));
            }
            Op::Resample { x, dir } => {
                acc(*x, kernels::resample_backward(self.value(*x).shape(), *dir, g));
            }
            Op::Relu { x } => {
                let d = self.value(*x).zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 }).expect("shape");
                acc(*x, d);
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::MulMap { x, m } => {
                let (xt, mt) = (self.value(*x), self.value(*m));
                let [n, c, h, w] = xt.shape();
                let hw = h * w;
                if self.ng(*x) {
                    let mut dx = g.clone();
                    for b in 0..n {
                        let mm = &mt.data()[b * hw..(b + 1) * hw];
                        for ch in 0..c {
                            let o = &mut dx.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                            for (v, &gm) in o.iter_mut().zip(mm) {
                                *v *= gm;
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if self.ng(*m) {
                    let mut dm = Tensor::zeros(mt.shape());
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for i in 0..hw {
                                dm.data_mut()[b * hw + i] += g.data()[off + i] * xt.data()[off + i];
                            }
                        }
                    }
                    acc(*m, dm);
                }
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, kernels::max_pool3_backward(self.value(*x).shape(), argmax, g));
            }
            Op::GateAct { x, tau } => {
                let d = self.value(*x).zip_map(g, |v, gv| gates::delta_grad(v, *tau) * gv).expect("shape");
                acc(*x, d);
            }
            Op::SpatialMean { x } => {
                let hw = g.plane();
                let mut d = g.clone();
                for p in d.data_mut().chunks_mut(hw) {
                    let s = p.iter().sum::<f64>() / hw as f64;
                    p.iter_mut().for_each(|v| *v = s);
                }
                acc(*x, d);
            }
            Op::Concat { xs } => {
                let [n, ct, h, w] = g.shape();
                let hw = h * w;
                let mut off = 0;
                for &x in xs {
                    let c = self.value(x).channels();
                    let mut d = Tensor::zeros(self.value(x).shape());
                    for b in 0..n {
                        let src = &g.data()[(b * ct + off) * hw..(b * ct + off + c) * hw];
                        d.data_mut()[b * c * hw..(b + 1) * c * hw].copy_from_slice(src);
                    }
                    off += c;
                    acc(x, d);
                }
            }
            Op::Channel { x, c } => {
                let [n, ch, h, w] = self.value(*x).shape();
                let hw = h * w;
                let mut d = Tensor::zeros([n, ch, h, w]);
                for b in 0..n {
                    d.data_mut()[(b * ch + c) * hw..(b * ch + c + 1) * hw]
                        .copy_from_slice(&g.data()[b * hw..(b + 1) * hw]);
                }
                acc(*x, d);
            }
            Op::SoftmaxChannels { .. } => {
                let y = &node.value;
                let [n, c, h, w] = y.shape();
                let hw = h * w;
                let mut d = Tensor::zeros(y.shape());
                for b in 0..n {
                    for i in 0..hw {
                        let at = |k: usize| (b * c + k) * hw + i;
                        let dot: f64 = (0..c).map(|k| g.data()[at(k)] * y.data()[at(k)]).sum();
                        for k in 0..c {
                            d.data_mut()[at(k)] = y.data()[at(k)] * (g.data()[at(k)] - dot);
                        }
                    }
                }
                if let Op::SoftmaxChannels { x } = &node.op {
                    acc(*x, d);
                }
            }
            Op::Sum { x } => {
                acc(*x, Tensor::full(self.value(*x).shape(), g.item()));
            }
            Op::Mean { x } => {
                let t = self.value(*x);
                acc(*x, Tensor::full(t.shape(), g.item() / t.len() as f64));
            }
            Op::Linear { terms } => {
                for &(v, k) in terms {
                    acc(v, Tensor::scalar(k * g.item()));
                }
            }
            Op::DivScalar { x, d } => acc(*x, g.map(|v| v / d)),
            Op::Xent { logits, targets, weights, normalizer, probs } => {
                acc(*logits, kernels::softmax_xent_backward(probs, targets, weights, *normalizer, g.item()));
            }
            Op::SmoothL1 { pred, target, weights, beta, normalizer } => {
                let d = kernels::smooth_l1_backward(
                    self.value(*pred),
                    target,
                    weights,
                    *beta,
                    *normalizer,
                    g.item(),
                );
                acc(*pred, d);
            }
        }
    }
}
