//! Run configuration: a TOML document whose every key can be overridden
//! with `key=value` strings (`--set head.depth=4`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::SgdConfig;
use crate::budget::LossConfig;
use crate::error::{Error, Result};
use crate::head::{GateConfig, HeadConfig};

/// Environment variable naming the root that relative output dirs resolve against.
pub const OUTPUT_ROOT_ENV: &str = "DYNHEAD_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub image_size: usize,
    pub image_channels: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            image_size: 64,
            image_channels: 1,
            train_scenes: 256,
            eval_scenes: 64,
            min_objects: 1,
            max_objects: 3,
            min_size: 5.0,
            max_size: 40.0,
            noise: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    pub depth: usize,
    pub scales: usize,
    pub channels: usize,
    pub gn_groups: usize,
    /// Stride of the finest pyramid level (a power of two).
    pub min_stride: usize,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection { depth: 2, scales: 3, channels: 32, gn_groups: 8, min_stride: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub enable_depth: bool,
    pub enable_scale: bool,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { enable_depth: true, enable_scale: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda: f64,
    pub cls_weight: f64,
    pub reg_weight: f64,
    pub background_weight: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { lambda: 0.0, cls_weight: 1.0, reg_weight: 1.0, background_weight: 0.1, smooth_l1_beta: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch: usize,
    /// Fractions of `iterations` at which the learning rate drops 10x.
    pub lr_steps: Vec<f64>,
    /// Linear warmup from `warmup_factor · lr` over the first `warmup_iters`.
    pub warmup_iters: usize,
    pub warmup_factor: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            iterations: 2000,
            batch: 4,
            lr_steps: vec![2.0 / 3.0, 8.0 / 9.0],
            warmup_iters: 100,
            warmup_factor: 0.1,
            clip_norm: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Write a metrics row every `log_every` iterations (and the last one).
    pub log_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs/default"), log_every: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub head: HeadSection,
    pub gate: GateConfig,
    pub paths: PathsSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub output: OutputSection,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_literal(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Applies one `dotted.key=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(cfg_err(format!("bad key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| cfg_err(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_literal(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text and applies overrides in order.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| cfg_err(format!("parse error: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| cfg_err(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| cfg_err(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml_with_overrides(&self.to_toml(), overrides)
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            depth: self.head.depth,
            scales: self.head.scales,
            channels: self.head.channels,
            gn_groups: self.head.gn_groups,
            gate: self.gate.clone(),
            enable_depth: self.paths.enable_depth,
            enable_scale: self.paths.enable_scale,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { lambda: self.loss.lambda, cls_weight: self.loss.cls_weight, reg_weight: self.loss.reg_weight }
    }

    pub fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig { lr, momentum: self.optim.momentum, weight_decay: self.optim.weight_decay }
    }

    /// Learning rate at iteration `it` under the step schedule.
    pub fn lr_at(&self, it: usize) -> f64 {
        let frac = it as f64 / self.optim.iterations.max(1) as f64;
        let drops = self.optim.lr_steps.iter().filter(|&&s| frac >= s).count();
        let warm = if it < self.optim.warmup_iters {
            let a = it as f64 / self.optim.warmup_iters as f64;
            self.optim.warmup_factor * (1.0 - a) + a
        } else {
            1.0
        };
        self.optim.lr * warm * 0.1f64.powi(drops as i32)
    }

    /// Pyramid strides, finest first.
    pub fn strides(&self) -> Vec<usize> {
        (0..self.head.scales).map(|s| self.head.min_stride << s).collect()
    }

    /// `output.dir`, resolved against `$DYNHEAD_OUTPUT_ROOT` when relative.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.output.dir)
    }

    pub fn validate(&self) -> Result<()> {
        self.head_config().validate().map_err(|e| cfg_err(e.to_string()))?;
        self.loss_config().validate().map_err(|e| cfg_err(e.to_string()))?;
        if !self.head.min_stride.is_power_of_two() || self.head.min_stride < 2 {
            return Err(cfg_err("head.min_stride must be a power of two >= 2"));
        }
        let coarsest = self.head.min_stride << (self.head.scales - 1);
        if self.data.image_size % coarsest != 0 {
            return Err(cfg_err(format!(
                "data.image_size {} not divisible by coarsest stride {coarsest}",
                self.data.image_size
            )));
        }
        if self.optim.batch == 0 {
            return Err(cfg_err("optim.batch must be positive"));
        }
        if !(0.0..=1.0).contains(&self.optim.warmup_factor) || !(self.optim.clip_norm >= 0.0) {
            return Err(cfg_err("optim.warmup_factor must be in [0, 1] and optim.clip_norm >= 0"));
        }
        if !(self.optim.lr >= 0.0) || !(0.0..1.0).contains(&self.optim.momentum) || !(self.optim.weight_decay >= 0.0) {
            return Err(cfg_err("optim.lr/momentum/weight_decay out of range"));
        }
        if !(1..=3).contains(&self.data.image_channels) || self.data.train_scenes == 0 {
            return Err(cfg_err("data.image_channels must be 1..=3 and data.train_scenes positive"));
        }
        if !(self.loss.background_weight > 0.0) || !(self.loss.smooth_l1_beta > 0.0) {
            return Err(cfg_err("loss.background_weight and loss.smooth_l1_beta must be positive"));
        }
        if self.output.log_every == 0 {
            return Err(cfg_err("output.log_every must be positive"));
        }
        Ok(())
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir.to_path_buf(),
    }
}
