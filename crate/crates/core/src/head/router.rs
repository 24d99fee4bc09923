//! Fine-grained router: accumulate inputs, gate every path per location,
//! run enabled paths sparsely, and weight their outputs by the gates.

use crate::autodiff::{MacTag, ParameterSet, Tape, Var};
use crate::error::{invalid, Result};
use crate::gates::{self, GateActivationConfig, GateKind};
use crate::sparse::{self, SpatialMask};
use crate::tensor::Tensor;

use super::graph::{GateMode, NodeId, PathKind, RouterNode, RoutingGraph};
use super::paths;

/// One path's routing state at a node.
pub struct PathOutput {
    pub kind: PathKind,
    /// Gate map `m` at the node resolution.
    pub gate: Var,
    /// Receptive-field dilated gate map (continuous, feeds the budget).
    pub dilated: Var,
    pub mask: SpatialMask,
    /// `m ⊙ f(x)` resampled to the target node, or `None` when `m ≡ 0`.
    pub output: Option<Var>,
}

pub struct RouterOutput {
    pub node: NodeId,
    /// The accumulated input `x`.
    pub input: Var,
    pub paths: Vec<PathOutput>,
}

impl RouterOutput {
    pub fn path(&self, kind: PathKind) -> Option<&PathOutput> {
        self.paths.iter().find(|p| p.kind == kind)
    }
}

fn gate_maps(
    tape: &mut Tape,
    params: &ParameterSet,
    graph: &RoutingGraph,
    node: &RouterNode,
    x: Var,
) -> Result<Vec<Var>> {
    let gcfg = &graph.config.gate;
    let [n, _, h, w] = tape.value(x).shape();
    match gcfg.mode {
        GateMode::ForceOpen => {
            return Ok(node.paths.iter().map(|_| tape.constant(Tensor::ones([n, 1, h, w]))).collect());
        }
        GateMode::ForceClosed => {
            return Ok(node.paths.iter().map(|_| tape.constant(Tensor::zeros([n, 1, h, w]))).collect());
        }
        GateMode::Learned => {}
    }
    let prev = tape.set_mac_tag(MacTag::Gate);
    let mut logits = Vec::with_capacity(node.paths.len());
    for spec in &node.paths {
        let p = paths::gate_prefix(node.id.depth, spec.kind);
        let wv = tape.param(params, &format!("{p}.weight"))?;
        let bv = tape.param(params, &format!("{p}.bias"))?;
        logits.push(gates::gate_logits(tape, x, wv, bv, gcfg.coarse)?);
    }
    tape.set_mac_tag(prev);
    match gcfg.activation {
        GateKind::Delta => {
            let cfg = GateActivationConfig::new(gcfg.tau)?;
            logits.into_iter().map(|v| tape.gate_activation(v, cfg.tau())).collect()
        }
        GateKind::Softmax => {
            let stacked = tape.concat_channels(&logits)?;
            let sm = tape.softmax_channels(stacked)?;
            (0..logits.len()).map(|k| tape.channel(sm, k)).collect()
        }
    }
}

/// Runs one router. `inputs` are summed left to right into `x`.
pub fn router_forward(
    tape: &mut Tape,
    params: &ParameterSet,
    graph: &RoutingGraph,
    node: &RouterNode,
    inputs: &[Var],
) -> Result<RouterOutput> {
    if inputs.is_empty() {
        return invalid("router_forward", format!("node {} has no inputs", node.id));
    }
    let x = tape.add_all(inputs)?;
    let maps = gate_maps(tape, params, graph, node, x)?;
    let groups = graph.config.gn_groups;
    let mut out = Vec::with_capacity(node.paths.len());
    for (spec, m) in node.paths.iter().zip(maps) {
        let dilated = sparse::dilate(tape, m, spec.conv_depth)?;
        let mask = sparse::quantize_mask(tape.value(dilated))?.with_provenance(node.id, spec.kind);
        let output = if tape.value(m).data().iter().all(|&v| v == 0.0) {
            None
        } else {
            let prev = tape.set_mac_tag(MacTag::Path);
            let y = match spec.kind {
                PathKind::Depth => {
                    let f = paths::depth_path(tape, params, node.id.depth, x, Some(&mask), groups)?;
                    tape.mul_map(f, m)?
                }
                kind => {
                    let f = paths::scale_path_body(tape, params, node.id.depth, kind, x, Some(&mask), groups)?;
                    let weighted = tape.mul_map(f, m)?;
                    tape.resample(weighted, paths::direction(kind))?
                }
            };
            tape.set_mac_tag(prev);
            Some(y)
        };
        out.push(PathOutput { kind: spec.kind, gate: m, dilated, mask, output });
    }
    Ok(RouterOutput { node: node.id, input: x, paths: out })
}
