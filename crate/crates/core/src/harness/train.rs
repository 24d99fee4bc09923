//! SGD training loop with per-iteration metrics and checkpointing.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{clip_grad_norm, Checkpoint, MacTag, ParameterSet, Tape};
use crate::error::{Error, Result};

use super::config::RunConfig;
use super::data::{self, Scene};
use super::model::Model;

/// Seed offsets so data, init and batching draw from independent streams.
pub const TRAIN_DATA_STREAM: u64 = 0x7472_6169;
pub const EVAL_DATA_STREAM: u64 = 0x6576_616c;
const INIT_STREAM: u64 = 0x696e_6974;
const BATCH_STREAM: u64 = 0x6261_7463;

#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_budget: f64,
    pub loss: f64,
    /// Mean executed head MACs per sample in this batch, from the tape counters.
    pub head_macs: f64,
}

pub struct TrainOutcome {
    pub params: ParameterSet,
    pub records: Vec<IterRecord>,
}

pub fn train_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    data::gen_synthetic(cfg.seed ^ TRAIN_DATA_STREAM, cfg.data.train_scenes, &cfg.data, &cfg.strides())
}

pub fn eval_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    data::gen_synthetic(cfg.seed ^ EVAL_DATA_STREAM, cfg.data.eval_scenes, &cfg.data, &cfg.strides())
}

pub fn metrics_csv(records: &[IterRecord]) -> String {
    let mut s = String::from("iter,l_cls,l_reg,l_budget,loss,head_macs\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.iter, r.l_cls, r.l_reg, r.l_budget, r.loss, r.head_macs);
    }
    s
}

fn head_macs(tape: &Tape) -> f64 {
    let per: Vec<u64> = [MacTag::Gate, MacTag::Path, MacTag::Predict]
        .iter()
        .map(|&t| tape.macs(t))
        .fold(Vec::new(), |acc: Vec<u64>, v| {
            if acc.is_empty() {
                v
            } else {
                acc.iter().zip(v.iter().chain(std::iter::repeat(&0))).map(|(a, b)| a + b).collect()
            }
        });
    if per.is_empty() {
        0.0
    } else {
        per.iter().sum::<u64>() as f64 / per.len() as f64
    }
}

/// One forward/backward pass. Returns the record and (clipped) gradients.
pub fn train_step(
    model: &Model,
    params: &ParameterSet,
    batch: &[&Scene],
    iter: usize,
) -> Result<(IterRecord, crate::autodiff::Gradients)> {
    let mut tape = Tape::new();
    let images = data::batch_images(batch)?;
    let fwd = model.forward(&mut tape, params, images)?;
    let l = model.losses(&mut tape, &fwd, batch)?;
    let rec = IterRecord {
        iter,
        l_cls: tape.value(l.cls).item(),
        l_reg: tape.value(l.reg).item(),
        l_budget: tape.value(l.budget).item(),
        loss: tape.value(l.total).item(),
        head_macs: head_macs(&tape),
    };
    if !rec.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss at iteration {iter}: {rec:?}")));
    }
    let mut grads = tape.backward(l.total, params)?;
    if model.cfg.optim.clip_norm > 0.0 {
        clip_grad_norm(&mut grads, model.cfg.optim.clip_norm);
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{name}` at iteration {iter}")));
    }
    Ok((rec, grads))
}

/// Trains from scratch. With `out` set, writes `config.toml`, `metrics.csv`
/// and `checkpoint.bin` there; on a non-finite loss the last finite state is
/// saved before the error is returned.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let model = Model::new(cfg)?;
    let scenes = train_scenes(cfg)?;
    let mut params = model.init_params(cfg.seed ^ INIT_STREAM)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_STREAM);
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::new();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    }
    let save = |params: &ParameterSet, step: usize, records: &[IterRecord]| -> Result<()> {
        if let Some(dir) = out {
            std::fs::write(dir.join("metrics.csv"), metrics_csv(records))?;
            Checkpoint { meta: cfg.to_toml(), step: step as u64, params: params.clone() }.save(&dir.join("checkpoint.bin"))?;
        }
        Ok(())
    };
    for it in 0..cfg.optim.iterations {
        let mut batch = Vec::with_capacity(cfg.optim.batch);
        while batch.len() < cfg.optim.batch {
            if order.is_empty() {
                order = (0..scenes.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&scenes[order.pop().expect("non-empty")]);
        }
        let (rec, grads) = match train_step(&model, &params, &batch, it) {
            Ok(v) => v,
            Err(e @ Error::NonFinite(_)) => {
                save(&params, it, &records)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let before = params.clone();
        params.sgd_step(&grads, cfg.sgd(cfg.lr_at(it)))?;
        if let Some((name, _)) = params.iter().find(|(_, p)| !p.is_finite()) {
            let msg = format!("parameter `{name}` after the step at iteration {it}");
            records.push(rec);
            save(&before, it, &records)?;
            return Err(Error::NonFinite(msg));
        }
        if it % cfg.output.log_every == 0 || it + 1 == cfg.optim.iterations {
            records.push(rec);
        }
    }
    save(&params, cfg.optim.iterations, &records)?;
    Ok(TrainOutcome { params, records })
}
