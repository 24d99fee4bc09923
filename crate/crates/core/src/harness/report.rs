//! FLOPs report: per-sample realized head MACs and per-node budgets.

use std::path::Path;

use crate::autodiff::ParameterSet;
use crate::budget::BudgetReport;
use crate::error::Result;

use super::data::Scene;
use super::eval;
use super::model::Model;

pub const REPORT_FILE: &str = "flops_report.csv";

/// Builds the report over `scenes`; with `dir` set, writes `flops_report.csv`.
pub fn flops_report(model: &Model, params: &ParameterSet, scenes: &[Scene], dir: Option<&Path>) -> Result<BudgetReport> {
    let report = eval::evaluate(model, params, scenes)?.report;
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join(REPORT_FILE), report.to_csv())?;
    }
    Ok(report)
}
