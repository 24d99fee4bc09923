//! The fine-grained dynamic head: routing graph, paths, routers, and the
//! shared prediction convs.

pub mod graph;
pub mod paths;
pub mod router;

use rand::Rng;

use crate::autodiff::{MacTag, ParameterSet, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub use graph::{GateConfig, GateMode, HeadConfig, NodeId, PathKind, PathSpec, RouterNode, RoutingGraph};
pub use router::{router_forward, PathOutput, RouterOutput};

/// Standard deviation for path and prediction conv weights.
pub const CONV_INIT_STD: f64 = 0.01;

/// Adds path and gate parameters (shared across scales, distinct per depth).
pub fn init_head_params<R: Rng + ?Sized>(cfg: &HeadConfig, params: &mut ParameterSet, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    for d in 0..cfg.depth {
        let mut kinds = Vec::new();
        if cfg.enable_depth {
            kinds.push(PathKind::Depth);
        }
        if cfg.enable_scale && cfg.scales > 1 {
            kinds.extend([PathKind::ScaleUp, PathKind::ScaleDown]);
        }
        for kind in kinds {
            let p = paths::param_prefix(d, kind);
            match kind {
                PathKind::Depth => {
                    for i in 1..=2 {
                        params.insert(format!("{p}.conv{i}.weight"), Tensor::randn([c, c, 3, 3], CONV_INIT_STD, rng))?;
                        params.insert(format!("{p}.gn{i}.gamma"), Tensor::ones([c, 1, 1, 1]))?;
                        params.insert(format!("{p}.gn{i}.beta"), Tensor::zeros([c, 1, 1, 1]))?;
                    }
                }
                _ => {
                    params.insert(format!("{p}.conv.weight"), Tensor::randn([c, 1, 3, 3], CONV_INIT_STD, rng))?;
                    params.insert(format!("{p}.gn.gamma"), Tensor::ones([c, 1, 1, 1]))?;
                    params.insert(format!("{p}.gn.beta"), Tensor::zeros([c, 1, 1, 1]))?;
                }
            }
            let g = paths::gate_prefix(d, kind);
            params.insert(format!("{g}.weight"), Tensor::randn([1, c, 3, 3], cfg.gate.init_std, rng))?;
            params.insert(format!("{g}.bias"), Tensor::scalar(cfg.gate.tau + cfg.gate.init_open))?;
        }
    }
    Ok(())
}

/// Adds the classification (`num_classes` logits) and 4-channel box
/// regression convs shared by every scale.
pub fn init_pred_params<R: Rng + ?Sized>(
    channels: usize,
    num_classes: usize,
    params: &mut ParameterSet,
    rng: &mut R,
) -> Result<()> {
    for (name, k) in [("cls", num_classes), ("reg", 4)] {
        params.insert(format!("pred.{name}.weight"), Tensor::randn([k, channels, 3, 3], CONV_INIT_STD, rng))?;
        params.insert(format!("pred.{name}.bias"), Tensor::zeros([k, 1, 1, 1]))?;
    }
    Ok(())
}

pub struct HeadOutput {
    /// Depth-`D` accumulations, one per scale.
    pub outputs: Vec<Var>,
    /// Router states for every `(scale, depth)` node, depth-major.
    pub routers: Vec<RouterOutput>,
}

impl HeadOutput {
    pub fn router(&self, id: NodeId) -> Option<&RouterOutput> {
        self.routers.iter().find(|r| r.node == id)
    }
}

fn check_features(tape: &Tape, graph: &RoutingGraph, features: &[Var]) -> Result<usize> {
    if features.len() != graph.config.scales {
        return shape_err("head_forward", format!("{} features for {} scales", features.len(), graph.config.scales));
    }
    let n = tape.value(features[0]).batch();
    for (s, &f) in features.iter().enumerate() {
        let [fb, c, h, w] = tape.value(f).shape();
        if fb != n || c != graph.config.channels || (h, w) != graph.resolution(s) {
            return shape_err(
                "head_forward",
                format!(
                    "scale {s} feature {:?}, expected [{n}, {}, {}, {}]",
                    tape.value(f).shape(),
                    graph.config.channels,
                    graph.resolution(s).0,
                    graph.resolution(s).1
                ),
            );
        }
    }
    Ok(n)
}

fn accumulate(
    tape: &mut Tape,
    contributions: Vec<Var>,
    shape: [usize; 4],
) -> Result<Var> {
    if contributions.is_empty() {
        Ok(tape.constant(Tensor::zeros(shape)))
    } else {
        tape.add_all(&contributions)
    }
}

/// Runs every router depth by depth. Each node at depth `d + 1` sums the
/// depth output from `(s, d)`, the up-path output from `(s + 1, d)` and the
/// down-path output from `(s − 1, d)`, where those exist and were enabled.
pub fn head_forward(
    tape: &mut Tape,
    params: &ParameterSet,
    graph: &RoutingGraph,
    features: &[Var],
) -> Result<HeadOutput> {
    let n = check_features(tape, graph, features)?;
    let cfg = &graph.config;
    let shape = |s: usize| [n, cfg.channels, graph.resolution(s).0, graph.resolution(s).1];
    let mut inputs: Vec<Vec<Var>> = features.iter().map(|&f| vec![f]).collect();
    let mut routers = Vec::with_capacity(graph.nodes().len());
    for d in 0..cfg.depth {
        let mut next: Vec<Vec<Var>> = vec![Vec::new(); cfg.scales];
        let mut outs: Vec<RouterOutput> = Vec::with_capacity(cfg.scales);
        for s in 0..cfg.scales {
            let node = graph.node(NodeId { scale: s, depth: d });
            let ins = if inputs[s].is_empty() { vec![tape.constant(Tensor::zeros(shape(s)))] } else { inputs[s].clone() };
            outs.push(router_forward(tape, params, graph, node, &ins)?);
        }
        // Fixed accumulation order per target: depth, up-from-coarser, down-from-finer.
        for s in 0..cfg.scales {
            let target = NodeId { scale: s, depth: d + 1 };
            let sources = if d + 1 < cfg.depth { graph.node(target).incoming.clone() } else { graph.output_sources(s) };
            for (src, kind) in sources {
                if let Some(y) = outs[src.scale].path(kind).and_then(|p| p.output) {
                    next[s].push(y);
                }
            }
        }
        routers.extend(outs);
        inputs = next;
    }
    let outputs = (0..cfg.scales)
        .map(|s| accumulate(tape, std::mem::take(&mut inputs[s]), shape(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(HeadOutput { outputs, routers })
}

/// The same head with no routers: every path runs densely and ungated.
pub fn static_head_forward(
    tape: &mut Tape,
    params: &ParameterSet,
    graph: &RoutingGraph,
    features: &[Var],
) -> Result<Vec<Var>> {
    let n = check_features(tape, graph, features)?;
    let cfg = &graph.config;
    let shape = |s: usize| [n, cfg.channels, graph.resolution(s).0, graph.resolution(s).1];
    let mut inputs: Vec<Vec<Var>> = features.iter().map(|&f| vec![f]).collect();
    let prev = tape.set_mac_tag(MacTag::Path);
    for d in 0..cfg.depth {
        let mut path_out: Vec<Vec<(PathKind, Var)>> = Vec::with_capacity(cfg.scales);
        for s in 0..cfg.scales {
            let x = accumulate(tape, inputs[s].clone(), shape(s))?;
            let node = graph.node(NodeId { scale: s, depth: d });
            let mut outs = Vec::new();
            for spec in &node.paths {
                let y = match spec.kind {
                    PathKind::Depth => paths::depth_path(tape, params, d, x, None, cfg.gn_groups)?,
                    kind => paths::scale_path(tape, params, d, kind, x, None, cfg.gn_groups)?,
                };
                outs.push((spec.kind, y));
            }
            path_out.push(outs);
        }
        let mut next: Vec<Vec<Var>> = vec![Vec::new(); cfg.scales];
        for s in 0..cfg.scales {
            let target = NodeId { scale: s, depth: d + 1 };
            let sources = if d + 1 < cfg.depth { graph.node(target).incoming.clone() } else { graph.output_sources(s) };
            for (src, kind) in sources {
                if let Some(&(_, y)) = path_out[src.scale].iter().find(|(k, _)| *k == kind) {
                    next[s].push(y);
                }
            }
        }
        inputs = next;
    }
    tape.set_mac_tag(prev);
    (0..cfg.scales).map(|s| accumulate(tape, std::mem::take(&mut inputs[s]), shape(s))).collect()
}

/// Per-scale `(class logits, box regression)` from the shared prediction convs.
pub fn predict(tape: &mut Tape, params: &ParameterSet, outputs: &[Var]) -> Result<Vec<(Var, Var)>> {
    let wc = tape.param(params, "pred.cls.weight")?;
    let bc = tape.param(params, "pred.cls.bias")?;
    let wr = tape.param(params, "pred.reg.weight")?;
    let br = tape.param(params, "pred.reg.bias")?;
    let prev = tape.set_mac_tag(MacTag::Predict);
    let res = outputs
        .iter()
        .map(|&o| Ok((tape.conv2d(o, wc, Some(bc), 1)?, tape.conv2d(o, wr, Some(br), 1)?)))
        .collect();
    tape.set_mac_tag(prev);
    res
}
