//! Evaluation: detection-proxy metrics, gate densities and realized costs.

use crate::autodiff::{ParameterSet, Tape};
use crate::budget::{self, BudgetReport};
use crate::error::Result;
use crate::head::{NodeId, PathKind};

use super::data::{self, Scene, BACKGROUND, NUM_CLASSES};
use super::model::Model;

/// Scenes per evaluation forward pass.
pub const EVAL_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct GateDensity {
    pub node: NodeId,
    pub path: PathKind,
    /// Fraction of locations with `m > 0`.
    pub density: f64,
    /// Mean of `m`.
    pub mean_gate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub scenes: usize,
    /// Argmax accuracy over all cells of all levels.
    pub pixel_accuracy: f64,
    /// Accuracy of the object-class argmax on foreground cells.
    pub fg_class_accuracy: f64,
    /// Mean absolute box-offset error on foreground cells.
    pub mean_reg_error: f64,
    /// Class-aware foreground F1 of the full argmax.
    pub proxy_f1: f64,
    pub gates: Vec<GateDensity>,
    pub report: BudgetReport,
}

impl EvalMetrics {
    /// Mean gate density over every node and path at `depth`.
    pub fn depth_density(&self, depth: usize) -> Option<f64> {
        let v: Vec<f64> = self.gates.iter().filter(|g| g.node.depth == depth).map(|g| g.density).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    pub fn flops_avg(&self) -> f64 {
        self.report.summary().map_or(0.0, |s| 2.0 * s.avg)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in [
            ("scenes", self.scenes as f64),
            ("pixel_accuracy", self.pixel_accuracy),
            ("fg_class_accuracy", self.fg_class_accuracy),
            ("mean_reg_error", self.mean_reg_error),
            ("proxy_f1", self.proxy_f1),
            ("flops_avg", self.flops_avg()),
        ] {
            s.push_str(&format!("{k},{v}\n"));
        }
        for g in &self.gates {
            s.push_str(&format!("density_{}_{},{}\n", g.node, g.path.name(), g.density));
        }
        s
    }
}

#[derive(Default)]
struct Tally {
    cells: usize,
    correct: usize,
    fg: usize,
    fg_class_correct: usize,
    reg_abs: f64,
    tp: usize,
    pred_fg: usize,
}

pub fn evaluate(model: &Model, params: &ParameterSet, scenes: &[Scene]) -> Result<EvalMetrics> {
    let graph = &model.graph;
    let costs = budget::path_costs(graph);
    let static_macs = model.static_macs();
    let mut report = BudgetReport {
        node_ids: graph.nodes().iter().map(|n| n.id).collect(),
        rows: Vec::with_capacity(scenes.len()),
        node_costs: costs.iter().map(|c| budget::node_cost(c)).collect(),
        static_head_macs: budget::static_path_macs(graph) + static_macs.total(),
    };
    let mut gate_acc: Vec<(NodeId, PathKind, f64, f64)> = Vec::new();
    let mut t = Tally::default();
    for chunk in scenes.chunks(EVAL_BATCH) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, params, data::batch_images(&refs)?)?;
        let macs = budget::head_realized_macs(graph, &fwd.head, static_macs);
        for (i, scene) in chunk.iter().enumerate() {
            let mut node_b = Vec::with_capacity(costs.len());
            for (router, nc) in fwd.head.routers.iter().zip(&costs) {
                let mut b = 0.0;
                for p in &router.paths {
                    let c = nc.iter().find(|c| c.kind == p.kind).expect("cost for every path");
                    let [_, h, w, _] = [0, p.mask.shape()[2], p.mask.shape()[3], 0];
                    b += c.per_location as f64 * p.mask.enabled_in(i) as f64 / (h * w) as f64;
                }
                node_b.push(b);
            }
            report.rows.push((scene.id, macs[i], node_b));
        }
        let mut k = 0;
        for router in &fwd.head.routers {
            for p in &router.paths {
                let m = tape.value(p.gate);
                let dens = m.data().iter().filter(|&&v| v > 0.0).count() as f64;
                if gate_acc.len() <= k {
                    gate_acc.push((router.node, p.kind, 0.0, 0.0));
                }
                gate_acc[k].2 += dens;
                gate_acc[k].3 += m.sum();
                k += 1;
            }
        }
        for (l, (logits, reg)) in fwd.preds.iter().enumerate() {
            let (lg, rg) = (tape.value(*logits), tape.value(*reg));
            for (i, scene) in chunk.iter().enumerate() {
                let tg = &scene.targets[l];
                for y in 0..tg.height {
                    for x in 0..tg.width {
                        let truth = tg.classes[y * tg.width + x];
                        let score = |c: usize| lg.at(i, c, y, x);
                        let pred = (0..NUM_CLASSES).fold(0, |b, c| if score(c) > score(b) { c } else { b });
                        t.cells += 1;
                        t.correct += (pred == truth) as usize;
                        if pred != BACKGROUND {
                            t.pred_fg += 1;
                        }
                        if truth != BACKGROUND {
                            t.fg += 1;
                            t.tp += (pred == truth) as usize;
                            let obj = (1..NUM_CLASSES).fold(1, |b, c| if score(c) > score(b) { c } else { b });
                            t.fg_class_correct += (obj == truth) as usize;
                            for c in 0..4 {
                                t.reg_abs += (rg.at(i, c, y, x) - tg.reg.at(0, c, y, x)).abs() / 4.0;
                            }
                        }
                    }
                }
            }
        }
    }
    let frac = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
    let gates = gate_acc
        .into_iter()
        .map(|(node, path, d, s)| {
            let (h, w) = graph.resolution(node.scale);
            let locs = scenes.len() * h * w;
            GateDensity { node, path, density: frac(d, locs), mean_gate: frac(s, locs) }
        })
        .collect();
    let denom = t.pred_fg + t.fg;
    Ok(EvalMetrics {
        scenes: scenes.len(),
        pixel_accuracy: frac(t.correct as f64, t.cells),
        fg_class_accuracy: frac(t.fg_class_correct as f64, t.fg),
        mean_reg_error: frac(t.reg_abs, t.fg),
        proxy_f1: frac(2.0 * t.tp as f64, denom),
        gates,
        report,
    })
}
