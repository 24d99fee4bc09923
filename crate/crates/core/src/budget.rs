//! Compute budget: per-path costs, per-node realized budgets, the
//! normalized budget loss and the joint objective.
//!
//! Costs are multiply-accumulates per location. For node `l` with paths `k`,
//! `B_l = mean_i Σ_k C_kl · M_kl(i)` where `M_kl` is the receptive-field
//! dilated gate map, and the loss is `Σ_l B_l / Σ_l Σ_k C_kl`.

use std::fmt::Write as _;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::head::{HeadOutput, NodeId, PathKind, RoutingGraph};
use crate::sparse::SpatialMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathCost {
    pub node: NodeId,
    pub kind: PathKind,
    /// MACs per enabled location.
    pub per_location: u64,
}

/// Costs of every path in the graph, grouped by node, depth-major.
pub fn path_costs(graph: &RoutingGraph) -> Vec<Vec<PathCost>> {
    graph
        .nodes()
        .iter()
        .map(|n| {
            n.paths
                .iter()
                .map(|p| PathCost { node: n.id, kind: p.kind, per_location: p.macs_per_location() })
                .collect()
        })
        .collect()
}

/// `Σ_k C_k · mean(M_k)` recorded on the tape.
pub fn node_budget(tape: &mut Tape, dilated: &[(Var, &PathCost)]) -> Result<Var> {
    let mut terms = Vec::with_capacity(dilated.len());
    for &(m, cost) in dilated {
        let mean = tape.mean(m)?;
        terms.push((mean, cost.per_location as f64));
    }
    if terms.is_empty() {
        let z = tape.constant(Tensor::scalar(0.0));
        return tape.linear(&[(z, 1.0)]);
    }
    tape.linear(&terms)
}

/// Plain-value [`node_budget`].
pub fn node_budget_value(dilated: &[(&Tensor, &PathCost)]) -> f64 {
    dilated.iter().map(|(m, c)| c.per_location as f64 * m.mean()).sum()
}

/// `Σ_k C_k` for one node.
pub fn node_cost(costs: &[PathCost]) -> f64 {
    costs.iter().map(|c| c.per_location as f64).sum()
}

/// `Σ_l B_l / Σ_l C_l`.
pub fn budget_loss(tape: &mut Tape, budgets: &[Var], costs: &[Vec<PathCost>]) -> Result<Var> {
    let denom: f64 = costs.iter().map(|c| node_cost(c)).sum();
    if !(denom > 0.0) {
        return invalid("budget_loss", "head has no paths (zero total cost)");
    }
    let terms: Vec<_> = budgets.iter().map(|&b| (b, 1.0)).collect();
    let total = tape.linear(&terms)?;
    tape.div_scalar(total, denom)
}

pub fn budget_loss_value(budgets: &[f64], costs: &[Vec<PathCost>]) -> Result<f64> {
    let denom: f64 = costs.iter().map(|c| node_cost(c)).sum();
    if !(denom > 0.0) {
        return invalid("budget_loss", "head has no paths (zero total cost)");
    }
    Ok(budgets.iter().sum::<f64>() / denom)
}

/// Budget loss of a head forward pass, built from every router's dilated maps.
pub fn head_budget_loss(tape: &mut Tape, graph: &RoutingGraph, head: &HeadOutput) -> Result<(Var, Vec<Var>)> {
    let costs = path_costs(graph);
    let mut budgets = Vec::with_capacity(costs.len());
    for (router, node_costs) in head.routers.iter().zip(&costs) {
        let pairs: Vec<_> = router
            .paths
            .iter()
            .map(|p| {
                let c = node_costs.iter().find(|c| c.kind == p.kind).expect("cost for every path");
                (p.dilated, c)
            })
            .collect();
        budgets.push(node_budget(tape, &pairs)?);
    }
    let loss = budget_loss(tape, &budgets, &costs)?;
    Ok((loss, budgets))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub cls_weight: f64,
    pub reg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.0, cls_weight: 1.0, reg_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return invalid("loss", format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        Ok(())
    }
}

/// `L = w_cls·L_cls + w_reg·L_reg + L_center + λ·L_budget` with `L_center ≡ 0`.
pub fn total_loss(tape: &mut Tape, l_cls: Var, l_reg: Var, l_budget: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    for (name, v) in [("l_cls", l_cls), ("l_reg", l_reg), ("l_budget", l_budget)] {
        let x = tape.value(v).item();
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {x}")));
        }
    }
    let l_center = tape.constant(Tensor::scalar(0.0));
    tape.linear(&[(l_cls, cfg.cls_weight), (l_reg, cfg.reg_weight), (l_center, 0.0), (l_budget, cfg.lambda)])
}

/// MACs of layers that run regardless of the gates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StaticMacs {
    /// Per sample: all gate convs.
    pub gates: u64,
    /// Per sample: prediction convs at every scale.
    pub predict: u64,
}

impl StaticMacs {
    pub fn for_graph(graph: &RoutingGraph, num_classes: usize) -> Self {
        let c = graph.config.channels as u64;
        let mut gates = 0;
        for n in graph.nodes() {
            let (h, w) = graph.resolution(n.id.scale);
            gates += (h * w) as u64 * n.paths.len() as u64 * c * 9;
        }
        let locs: u64 = graph.resolutions().iter().map(|&(h, w)| (h * w) as u64).sum();
        let predict = locs * c * 9 * (num_classes as u64 + 4);
        StaticMacs { gates, predict }
    }

    pub fn total(&self) -> u64 {
        self.gates + self.predict
    }
}

/// Executed head MACs per sample from the quantized masks:
/// `Σ enabled(n, k, l) · C_kl + static`.
pub fn realized_macs(
    masks: &[(&SpatialMask, &PathCost)],
    batch: usize,
    static_macs: StaticMacs,
) -> Vec<u64> {
    (0..batch)
        .map(|n| {
            masks.iter().map(|(m, c)| m.enabled_in(n) as u64 * c.per_location).sum::<u64>() + static_macs.total()
        })
        .collect()
}

/// Path MACs the head would execute with every mask full, per sample.
pub fn static_path_macs(graph: &RoutingGraph) -> u64 {
    path_costs(graph)
        .iter()
        .flatten()
        .map(|c| {
            let (h, w) = graph.resolution(c.node.scale);
            (h * w) as u64 * c.per_location
        })
        .sum()
}

/// Realized MACs for a head forward pass.
pub fn head_realized_macs(graph: &RoutingGraph, head: &HeadOutput, static_macs: StaticMacs) -> Vec<u64> {
    let costs = path_costs(graph);
    let mut pairs = Vec::new();
    for (router, node_costs) in head.routers.iter().zip(&costs) {
        for p in &router.paths {
            let c = node_costs.iter().find(|c| c.kind == p.kind).expect("cost for every path");
            pairs.push((&p.mask, c));
        }
    }
    let batch = head.routers.first().map_or(0, |r| r.paths.first().map_or(0, |p| p.mask.shape()[0]));
    realized_macs(&pairs, batch, static_macs)
}

/// Per-sample realized costs and per-node budgets over a dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BudgetReport {
    pub node_ids: Vec<NodeId>,
    /// `(sample_id, head_macs, per-node B_l from the quantized masks)`.
    pub rows: Vec<(usize, u64, Vec<f64>)>,
    /// Per-node `Σ_k C_kl` (per-location).
    pub node_costs: Vec<f64>,
    pub static_head_macs: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MacSummary {
    pub avg: f64,
    pub max: u64,
    pub min: u64,
}

impl BudgetReport {
    pub fn summary(&self) -> Option<MacSummary> {
        if self.rows.is_empty() {
            return None;
        }
        let max = self.rows.iter().map(|r| r.1).max()?;
        let min = self.rows.iter().map(|r| r.1).min()?;
        let avg = self.rows.iter().map(|r| r.1 as f64).sum::<f64>() / self.rows.len() as f64;
        Some(MacSummary { avg, max, min })
    }

    /// CSV with one row per sample and trailing `avg`, `max`, `min` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,head_macs,head_flops");
        for id in &self.node_ids {
            let _ = write!(s, ",budget_{id}");
        }
        s.push('\n');
        for (sid, macs, budgets) in &self.rows {
            let _ = write!(s, "{sid},{macs},{}", 2 * macs);
            for b in budgets {
                let _ = write!(s, ",{b}");
            }
            s.push('\n');
        }
        if let Some(sum) = self.summary() {
            let k = self.node_ids.len();
            let node_mean = |j: usize| self.rows.iter().map(|r| r.2[j]).sum::<f64>() / self.rows.len() as f64;
            let _ = write!(s, "avg,{},{}", sum.avg, 2.0 * sum.avg);
            for j in 0..k {
                let _ = write!(s, ",{}", node_mean(j));
            }
            s.push('\n');
            for (label, v) in [("max", sum.max), ("min", sum.min)] {
                let _ = write!(s, "{label},{v},{}", 2 * v);
                s.push_str(&",".repeat(k));
                s.push('\n');
            }
        }
        s
    }
}
