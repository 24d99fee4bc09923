//! Finite-difference gradient cases shared by the gradient tests and the
//! acceptance suite. Each case reports its worst relative error.

use std::sync::Arc;

use dynhead::autodiff::{Direction, ParameterSet, Tape, Var};
use dynhead::budget::{self, LossConfig};
use dynhead::head::{self, GateConfig, HeadConfig, RoutingGraph};
use dynhead::ops;
use dynhead::sparse::{self, SpatialMask};
use dynhead::Tensor;
use rand::Rng;

use super::*;

pub const TOL: f64 = 1e-4;

#[derive(Debug)]
pub struct CaseResult {
    pub label: String,
    pub worst: f64,
    pub at: String,
}

impl CaseResult {
    pub fn ok(&self) -> bool {
        self.worst < TOL
    }
}

/// Builds the loss once for the analytic gradient, then differences it.
pub fn check(build: &dyn Fn(&mut Tape, &ParameterSet) -> Var, params: &ParameterSet, per_param: usize, seed: u64) -> (f64, String) {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    let grads = tape.backward(loss, params).unwrap();
    let f = |p: &ParameterSet| {
        let mut t = Tape::new();
        let l = build(&mut t, p);
        t.value(l).item()
    };
    grad_check(&f, &grads, params, per_param, seed)
}

fn case(label: String, build: &dyn Fn(&mut Tape, &ParameterSet) -> Var, params: &ParameterSet) -> CaseResult {
    let (worst, at) = check(build, params, 40, 11);
    CaseResult { label, worst, at }
}

pub fn params(entries: Vec<(&str, Tensor)>) -> ParameterSet {
    let mut p = ParameterSet::new();
    for (n, t) in entries {
        p.insert(n, t).unwrap();
    }
    p
}

/// Random tensor with every entry at least `gap` away from zero.
pub fn away_from_zero(shape: [usize; 4], gap: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::randn(shape, 1.0, &mut r).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

pub fn conv_cases() -> Vec<CaseResult> {
    let mut r = rng(1);
    let mut out = Vec::new();
    for &(cin, cout, g) in &[(3, 4, 1), (4, 4, 4), (4, 6, 2)] {
        let p = params(vec![
            ("x", Tensor::randn([2, cin, 5, 4], 1.0, &mut r)),
            ("w", Tensor::randn([cout, cin / g, 3, 3], 1.0, &mut r)),
            ("b", Tensor::randn([cout, 1, 1, 1], 1.0, &mut r)),
        ]);
        let build = move |t: &mut Tape, p: &ParameterSet| {
            let (x, w, b) = (t.param(p, "x").unwrap(), t.param(p, "w").unwrap(), t.param(p, "b").unwrap());
            let y = t.conv2d(x, w, Some(b), g).unwrap();
            probe(t, y, 3)
        };
        out.push(case(format!("conv2d groups={g}"), &build, &p));

        let mask = SpatialMask::from_binary(&random_mask(&mut r, 2, 5, 4, 0.4)).unwrap();
        let build = move |t: &mut Tape, p: &ParameterSet| {
            let (x, w, b) = (t.param(p, "x").unwrap(), t.param(p, "w").unwrap(), t.param(p, "b").unwrap());
            let y = sparse::sparse_conv(t, x, w, Some(b), g, &mask).unwrap();
            probe(t, y, 4)
        };
        out.push(case(format!("sparse_conv2d groups={g}"), &build, &p));
    }
    out
}

pub fn norm_resample_cases() -> Vec<CaseResult> {
    let mut r = rng(3);
    let mut out = Vec::new();
    let p = params(vec![
        ("x", Tensor::randn([2, 4, 3, 3], 2.0, &mut r)),
        ("gamma", Tensor::randn([4, 1, 1, 1], 1.0, &mut r)),
        ("beta", Tensor::randn([4, 1, 1, 1], 1.0, &mut r)),
    ]);
    for groups in [1usize, 2, 4] {
        let build = move |t: &mut Tape, p: &ParameterSet| {
            let (x, ga, be) = (t.param(p, "x").unwrap(), t.param(p, "gamma").unwrap(), t.param(p, "beta").unwrap());
            let y = t.group_norm(x, ga, be, groups, 1e-5).unwrap();
            probe(t, y, 6)
        };
        out.push(case(format!("group_norm groups={groups}"), &build, &p));
    }
    let p = params(vec![("x", Tensor::randn([2, 2, 4, 6], 1.0, &mut r))]);
    for dir in [Direction::Up, Direction::Down] {
        let build = move |t: &mut Tape, p: &ParameterSet| {
            let x = t.param(p, "x").unwrap();
            let y = t.resample(x, dir).unwrap();
            probe(t, y, 7)
        };
        out.push(case(format!("resample {dir:?}"), &build, &p));
    }
    out
}

pub fn elementwise_cases() -> Vec<CaseResult> {
    let mut r = rng(4);
    let mut out = Vec::new();
    let p = params(vec![
        ("a", away_from_zero([2, 3, 4, 4], 0.05, 40)),
        ("b", Tensor::randn([2, 3, 4, 4], 1.0, &mut r)),
        ("m", Tensor::uniform([2, 1, 4, 4], 0.0, 1.0, &mut r)),
    ]);
    let build = |t: &mut Tape, p: &ParameterSet| {
        let (a, b, m) = (t.param(p, "a").unwrap(), t.param(p, "b").unwrap(), t.param(p, "m").unwrap());
        let ra = t.relu(a).unwrap();
        let s = t.add(ra, b).unwrap();
        let s = t.add_all(&[s, a, b]).unwrap();
        let y = t.mul_map(s, m).unwrap();
        probe(t, y, 8)
    };
    out.push(case("relu/add/add_all/mul_map".into(), &build, &p));

    let p = params(vec![("v", away_from_zero([1, 1, 6, 6], 0.05, 41).scale(2.0))]);
    for tau in [0.0, 0.5, 1.5, 2.0] {
        let build = move |t: &mut Tape, p: &ParameterSet| {
            let v = t.param(p, "v").unwrap();
            let y = t.gate_activation(v, tau).unwrap();
            probe(t, y, 9)
        };
        out.push(case(format!("gate_activation tau={tau}"), &build, &p));
    }
    out
}

pub fn pooling_channel_cases() -> Vec<CaseResult> {
    let mut r = rng(5);
    let mut out = Vec::new();
    // Continuous random values: no ties in any window.
    let p = params(vec![("x", Tensor::randn([2, 2, 6, 5], 1.0, &mut r))]);
    for repeats in [1usize, 2, 3] {
        let build = move |t: &mut Tape, p: &ParameterSet| {
            let x = t.param(p, "x").unwrap();
            let y = t.max_pool_3x3_stride1(x, repeats).unwrap();
            probe(t, y, 10)
        };
        out.push(case(format!("max_pool_3x3_stride1 repeats={repeats}"), &build, &p));
    }
    let build = |t: &mut Tape, p: &ParameterSet| {
        let x = t.param(p, "x").unwrap();
        let y = t.spatial_mean(x).unwrap();
        probe(t, y, 12)
    };
    out.push(case("spatial_mean".into(), &build, &p));

    let p = params(vec![
        ("a", Tensor::randn([2, 1, 3, 3], 1.0, &mut r)),
        ("b", Tensor::randn([2, 2, 3, 3], 1.0, &mut r)),
    ]);
    let build = |t: &mut Tape, p: &ParameterSet| {
        let (a, b) = (t.param(p, "a").unwrap(), t.param(p, "b").unwrap());
        let cat = t.concat_channels(&[a, b]).unwrap();
        let sm = t.softmax_channels(cat).unwrap();
        let c1 = t.channel(sm, 1).unwrap();
        let c2 = t.channel(cat, 2).unwrap();
        let y = t.mul_map(sm, c2).unwrap();
        let l1 = probe(t, y, 13);
        let l2 = probe(t, c1, 14);
        t.linear(&[(l1, 1.0), (l2, 0.5)]).unwrap()
    };
    out.push(case("concat_channels/softmax_channels/channel".into(), &build, &p));
    out
}

pub fn loss_cases() -> Vec<CaseResult> {
    let mut r = rng(6);
    let n_loc = 2 * 3 * 4;
    let targets: Vec<usize> = (0..n_loc).map(|_| r.random_range(0..3)).collect();
    let weights: Vec<f64> = (0..n_loc).map(|_| r.random_range(0.1..1.0)).collect();
    let reg_t = Tensor::randn([2, 4, 3, 4], 1.0, &mut r);
    let p = params(vec![
        ("logits", Tensor::randn([2, 3, 3, 4], 2.0, &mut r)),
        // Offsets from the target stay clear of the smooth-L1 kink at beta.
        ("pred", reg_t.zip_map(&away_from_zero([2, 4, 3, 4], 0.1, 42), |t, d| t + d).unwrap()),
        ("s", Tensor::randn([2, 2, 2, 2], 1.0, &mut r)),
    ]);
    let (tg, wt, rt) = (Arc::new(targets), Arc::new(weights), Arc::new(reg_t));
    let build = move |t: &mut Tape, p: &ParameterSet| {
        let (lg, pr, s) = (t.param(p, "logits").unwrap(), t.param(p, "pred").unwrap(), t.param(p, "s").unwrap());
        let xe = t.softmax_xent(lg, tg.clone(), wt.clone(), 7.5).unwrap();
        let sl = t.smooth_l1(pr, rt.clone(), wt.clone(), 0.05, 3.0).unwrap();
        let s0 = t.channel(s, 0).unwrap();
        let sq = t.mul_map(s, s0).unwrap();
        let m = t.mean(sq).unwrap();
        let sd = t.div_scalar(s, -3.0).unwrap();
        let su = t.sum(sd).unwrap();
        t.linear(&[(xe, 1.0), (sl, 2.0), (m, -0.5), (su, 0.25)]).unwrap()
    };
    vec![case("softmax_xent/smooth_l1/mean/sum/div_scalar/linear".into(), &build, &p)]
}

pub fn all_op_cases() -> Vec<CaseResult> {
    let mut v = conv_cases();
    v.extend(norm_resample_cases());
    v.extend(elementwise_cases());
    v.extend(pooling_channel_cases());
    v.extend(loss_cases());
    v
}

/// A D=2, 2-scale head with C=4 and random gates, run through prediction,
/// detection losses, the budget and the joint objective.
pub struct HeadCase {
    pub graph: RoutingGraph,
    pub params: ParameterSet,
    targets: Vec<Arc<Vec<usize>>>,
    reg_targets: Vec<Arc<Tensor>>,
    weights: Vec<Arc<Vec<f64>>>,
}

const C: usize = 4;
const N: usize = 2;

pub fn head_case(seed: u64, coarse: bool) -> HeadCase {
    let mut r = rng(seed);
    let gate = GateConfig { tau: r.random_range(0.5..2.0), coarse, ..GateConfig::default() };
    let cfg = HeadConfig { depth: 2, scales: 2, channels: C, gn_groups: 2, gate, ..HeadConfig::default() };
    let graph = RoutingGraph::new(cfg.clone(), &[(4, 4), (2, 2)]).unwrap();
    let mut params = ParameterSet::new();
    head::init_head_params(&cfg, &mut params, &mut r).unwrap();
    head::init_pred_params(C, 3, &mut params, &mut r).unwrap();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let shape = params.get(&name).unwrap().shape();
        let t = if name.contains(".gate.") && name.ends_with("bias") {
            Tensor::scalar(r.random_range(-0.5..1.5))
        } else if name.ends_with("gamma") {
            Tensor::uniform(shape, 0.5, 1.5, &mut r)
        } else {
            Tensor::randn(shape, 0.4, &mut r)
        };
        params.set(&name, t).unwrap();
    }
    params.insert("feat.s0", Tensor::randn([N, C, 4, 4], 1.0, &mut r)).unwrap();
    params.insert("feat.s1", Tensor::randn([N, C, 2, 2], 1.0, &mut r)).unwrap();
    let mut targets = Vec::new();
    let mut reg_targets = Vec::new();
    let mut weights = Vec::new();
    for &(h, w) in &[(4usize, 4usize), (2, 2)] {
        let t: Vec<usize> = (0..N * h * w).map(|_| r.random_range(0..3)).collect();
        weights.push(Arc::new(t.iter().map(|&c| if c == 0 { 0.1 } else { 1.0 }).collect()));
        targets.push(Arc::new(t));
        reg_targets.push(Arc::new(Tensor::randn([N, 4, h, w], 1.0, &mut r)));
    }
    HeadCase { graph, params, targets, reg_targets, weights }
}

pub fn head_features(t: &mut Tape, p: &ParameterSet) -> Vec<Var> {
    vec![t.param(p, "feat.s0").unwrap(), t.param(p, "feat.s1").unwrap()]
}

pub fn head_loss(case: &HeadCase, t: &mut Tape, p: &ParameterSet) -> Var {
    let feats = head_features(t, p);
    let out = head::head_forward(t, p, &case.graph, &feats).unwrap();
    let preds = head::predict(t, p, &out.outputs).unwrap();
    let mut cls = Vec::new();
    let mut reg = Vec::new();
    let wsum: f64 = case.weights.iter().map(|w| w.iter().sum::<f64>()).sum();
    for (l, &(lg, rg)) in preds.iter().enumerate() {
        cls.push((t.softmax_xent(lg, case.targets[l].clone(), case.weights[l].clone(), wsum).unwrap(), 1.0));
        reg.push((t.smooth_l1(rg, case.reg_targets[l].clone(), case.weights[l].clone(), 1e-3, wsum).unwrap(), 1.0));
    }
    let l_cls = t.linear(&cls).unwrap();
    let l_reg = t.linear(&reg).unwrap();
    let (l_budget, _) = budget::head_budget_loss(t, &case.graph, &out).unwrap();
    let cfg = LossConfig { lambda: 0.7, cls_weight: 1.0, reg_weight: 0.5 };
    budget::total_loss(t, l_cls, l_reg, l_budget, &cfg).unwrap()
}

/// Smallest |gate pre-activation| over every router, recomputed from the
/// recorded router inputs with the tensor-level conv.
pub fn min_gate_margin(case: &HeadCase) -> f64 {
    let mut t = Tape::new();
    let feats = head_features(&mut t, &case.params);
    let out = head::head_forward(&mut t, &case.params, &case.graph, &feats).unwrap();
    let mut margin = f64::INFINITY;
    for router in &out.routers {
        let x = t.value(router.input);
        for p in &router.paths {
            let prefix = head::paths::gate_prefix(router.node.depth, p.kind);
            let w = case.params.get(&format!("{prefix}.weight")).unwrap();
            let b = case.params.get(&format!("{prefix}.bias")).unwrap();
            let v = ops::conv2d(x, w, Some(b), 1).unwrap();
            let vals: Vec<f64> = if case.graph.config.gate.coarse {
                (0..v.batch()).map(|i| v.sample(i).mean()).collect()
            } else {
                v.data().to_vec()
            };
            margin = vals.iter().fold(margin, |a, &q| a.min(q.abs()));
        }
    }
    margin
}

pub struct EndToEnd {
    pub result: CaseResult,
    pub points: usize,
    /// Whether the sampled states included both enabled and disabled locations.
    pub mixed: bool,
}

/// Samples head states until `points` have every gate pre-activation at
/// least 0.05 from the kink, and checks each.
pub fn end_to_end(coarse: bool, points: usize) -> EndToEnd {
    let mut worst = (0.0, String::new());
    let mut done = 0;
    let mut seed = 1000;
    let (mut saw_open, mut saw_closed) = (false, false);
    while done < points {
        seed += 1;
        let case = head_case(seed, coarse);
        if min_gate_margin(&case) < 0.05 {
            continue;
        }
        done += 1;
        let mut t = Tape::new();
        let feats = head_features(&mut t, &case.params);
        let out = head::head_forward(&mut t, &case.params, &case.graph, &feats).unwrap();
        for r in &out.routers {
            for p in &r.paths {
                saw_open |= !p.mask.is_empty();
                saw_closed |= !p.mask.is_full();
            }
        }
        let build = |t: &mut Tape, p: &ParameterSet| head_loss(&case, t, p);
        let (e, at) = check(&build, &case.params, 6, seed);
        if e > worst.0 {
            worst = (e, format!("seed {seed}: {at}"));
        }
    }
    let label = format!("head D=2 S=2 {} gates", if coarse { "coarse" } else { "fine" });
    EndToEnd { result: CaseResult { label, worst: worst.0, at: worst.1 }, points: done, mixed: saw_open && saw_closed }
}
