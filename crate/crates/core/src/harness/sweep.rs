//! Cartesian sweep over λ and τ with per-run outputs and a summary table.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Result};

use super::config::RunConfig;
use super::eval::{self, EvalMetrics};
use super::model::Model;
use super::train::{self, IterRecord};

pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0, 0.1, 0.4, 0.8, 1.6];

#[derive(Clone, Debug)]
pub struct SweepRun {
    pub lambda: f64,
    pub tau: f64,
    pub final_loss: f64,
    pub eval: EvalMetrics,
    pub records: Vec<IterRecord>,
}

pub fn run_dir_name(lambda: f64, tau: f64) -> String {
    format!("lambda_{lambda}_tau_{tau}")
}

/// Trains and evaluates one config per `(λ, τ)`. Run `i` writes to
/// `out/lambda_{λ}_tau_{τ}/` when `out` is set.
pub fn sweep(base: &RunConfig, lambdas: &[f64], taus: &[f64], out: Option<&Path>) -> Result<Vec<SweepRun>> {
    if lambdas.is_empty() || taus.is_empty() {
        return invalid("sweep", "empty lambda or tau grid");
    }
    let mut runs = Vec::with_capacity(lambdas.len() * taus.len());
    for &tau in taus {
        for &lambda in lambdas {
            let mut cfg = base.clone();
            cfg.loss.lambda = lambda;
            cfg.gate.tau = tau;
            cfg.validate()?;
            let dir = out.map(|o| o.join(run_dir_name(lambda, tau)));
            let outcome = train::train(&cfg, dir.as_deref())?;
            let model = Model::new(&cfg)?;
            let ev = eval::evaluate(&model, &outcome.params, &train::eval_scenes(&cfg)?)?;
            if let Some(d) = &dir {
                std::fs::write(d.join("eval.csv"), ev.to_csv())?;
            }
            let final_loss = outcome.records.last().map_or(f64::NAN, |r| r.loss);
            runs.push(SweepRun { lambda, tau, final_loss, eval: ev, records: outcome.records });
        }
    }
    if let Some(o) = out {
        std::fs::write(o.join("sweep.csv"), sweep_csv(&runs))?;
    }
    Ok(runs)
}

pub fn sweep_csv(runs: &[SweepRun]) -> String {
    let mut s = String::from("lambda,tau,final_loss,flops_avg,pixel_accuracy,fg_class_accuracy,mean_reg_error,proxy_f1\n");
    for r in runs {
        let e = &r.eval;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.lambda,
            r.tau,
            r.final_loss,
            e.flops_avg(),
            e.pixel_accuracy,
            e.fg_class_accuracy,
            e.mean_reg_error,
            e.proxy_f1
        );
    }
    s
}

/// Ranks with ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on tie-averaged ranks). `None` when
/// lengths differ, fewer than two points, or either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        // d = (0, 0, -1, 1, 0): 1 - 6·2 / (5·24) = 0.9
        let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((r - 0.9).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }
}
