//! Detector used by the harness: a small strided conv stub producing the
//! feature pyramid, the dynamic head, and the shared prediction convs.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Direction, MacTag, ParameterSet, Tape, Var};
use crate::budget::{self, StaticMacs};
use crate::error::{invalid, Result};
use crate::head::{self, HeadOutput, RoutingGraph};
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::data::{Scene, BACKGROUND, NUM_CLASSES};

pub struct Model {
    pub cfg: RunConfig,
    pub graph: RoutingGraph,
}

pub struct ModelForward {
    pub features: Vec<Var>,
    pub head: HeadOutput,
    /// Per scale `(class logits, box regression)`.
    pub preds: Vec<(Var, Var)>,
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub cls: Var,
    pub reg: Var,
    pub budget: Var,
    pub total: Var,
}

fn stem_widths(cfg: &RunConfig) -> Vec<usize> {
    let stages = cfg.head.min_stride.trailing_zeros() as usize;
    (0..stages).map(|i| (8usize << i).min(cfg.head.channels)).collect()
}

fn he(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = shape[1] * shape[2] * shape[3];
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let res: Vec<(usize, usize)> = cfg.strides().iter().map(|&s| (cfg.data.image_size / s, cfg.data.image_size / s)).collect();
        let graph = RoutingGraph::new(cfg.head_config(), &res)?;
        Ok(Model { cfg: cfg.clone(), graph })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        let c = self.cfg.head.channels;
        let mut cin = self.cfg.data.image_channels;
        for (i, &w) in stem_widths(&self.cfg).iter().enumerate() {
            p.insert(format!("stub.stem{i}.weight"), he([w, cin, 3, 3], &mut rng))?;
            p.insert(format!("stub.stem{i}.bias"), Tensor::zeros([w, 1, 1, 1]))?;
            cin = w;
        }
        p.insert("stub.p0.weight", he([c, cin, 3, 3], &mut rng))?;
        p.insert("stub.p0.bias", Tensor::zeros([c, 1, 1, 1]))?;
        for s in 1..self.cfg.head.scales {
            p.insert(format!("stub.p{s}.weight"), he([c, c, 3, 3], &mut rng))?;
            p.insert(format!("stub.p{s}.bias"), Tensor::zeros([c, 1, 1, 1]))?;
        }
        head::init_head_params(&self.graph.config, &mut p, &mut rng)?;
        head::init_pred_params(c, NUM_CLASSES, &mut p, &mut rng)?;
        Ok(p)
    }

    /// Feature pyramid, finest first.
    pub fn pyramid_stub(&self, tape: &mut Tape, params: &ParameterSet, image: Var) -> Result<Vec<Var>> {
        let prev = tape.set_mac_tag(MacTag::Backbone);
        let res = (|| {
            let mut x = image;
            for i in 0..stem_widths(&self.cfg).len() {
                let w = tape.param(params, &format!("stub.stem{i}.weight"))?;
                let b = tape.param(params, &format!("stub.stem{i}.bias"))?;
                let y = tape.conv2d(x, w, Some(b), 1)?;
                let y = tape.relu(y)?;
                x = tape.resample(y, Direction::Down)?;
            }
            let mut feats = Vec::with_capacity(self.cfg.head.scales);
            for s in 0..self.cfg.head.scales {
                if s > 0 {
                    x = tape.resample(x, Direction::Down)?;
                }
                let w = tape.param(params, &format!("stub.p{s}.weight"))?;
                let b = tape.param(params, &format!("stub.p{s}.bias"))?;
                let y = tape.conv2d(x, w, Some(b), 1)?;
                x = tape.relu(y)?;
                feats.push(x);
            }
            Ok(feats)
        })();
        tape.set_mac_tag(prev);
        res
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParameterSet, images: Tensor) -> Result<ModelForward> {
        let [_, c, h, w] = images.shape();
        if c != self.cfg.data.image_channels || h != self.cfg.data.image_size || w != self.cfg.data.image_size {
            return invalid("forward", format!("image batch {:?} does not match the data config", images.shape()));
        }
        let image = tape.constant(images);
        let features = self.pyramid_stub(tape, params, image)?;
        let head = head::head_forward(tape, params, &self.graph, &features)?;
        let preds = head::predict(tape, params, &head.outputs)?;
        Ok(ModelForward { features, head, preds })
    }

    /// Classification, regression, budget and joint losses for a batch.
    pub fn losses(&self, tape: &mut Tape, fwd: &ModelForward, scenes: &[&Scene]) -> Result<Losses> {
        let (cls, reg) = self.detection_losses(tape, &fwd.preds, scenes)?;
        let (budget, _) = budget::head_budget_loss(tape, &self.graph, &fwd.head)?;
        let total = budget::total_loss(tape, cls, reg, budget, &self.cfg.loss_config())?;
        Ok(Losses { cls, reg, budget, total })
    }

    /// Weighted softmax cross-entropy (background cells down-weighted),
    /// normalized by total weight, and smooth-L1 box loss over foreground
    /// cells, normalized by their count.
    pub fn detection_losses(&self, tape: &mut Tape, preds: &[(Var, Var)], scenes: &[&Scene]) -> Result<(Var, Var)> {
        if preds.len() != self.cfg.head.scales || scenes.is_empty() {
            return invalid("losses", format!("{} predictions for {} scenes", preds.len(), scenes.len()));
        }
        let bg = self.cfg.loss.background_weight;
        let mut per_level = Vec::with_capacity(preds.len());
        let (mut wsum, mut fg) = (0.0, 0usize);
        for l in 0..preds.len() {
            let mut targets = Vec::new();
            let mut regs = Vec::with_capacity(scenes.len());
            for s in scenes {
                let t = &s.targets[l];
                targets.extend_from_slice(&t.classes);
                regs.push(t.reg.clone());
            }
            let cw: Vec<f64> = targets.iter().map(|&c| if c == BACKGROUND { bg } else { 1.0 }).collect();
            let rw: Vec<f64> = targets.iter().map(|&c| if c == BACKGROUND { 0.0 } else { 1.0 }).collect();
            wsum += cw.iter().sum::<f64>();
            fg += rw.iter().filter(|&&w| w > 0.0).count();
            per_level.push((targets, cw, rw, Tensor::concat_batch(&regs)?));
        }
        let fg_norm = fg.max(1) as f64;
        let mut cls_terms = Vec::with_capacity(preds.len());
        let mut reg_terms = Vec::with_capacity(preds.len());
        for ((logits, box_pred), (targets, cw, rw, reg)) in preds.iter().zip(per_level) {
            cls_terms.push((tape.softmax_xent(*logits, Arc::new(targets), Arc::new(cw), wsum)?, 1.0));
            let r = tape.smooth_l1(*box_pred, Arc::new(reg), Arc::new(rw), self.cfg.loss.smooth_l1_beta, fg_norm)?;
            reg_terms.push((r, 1.0));
        }
        Ok((tape.linear(&cls_terms)?, tape.linear(&reg_terms)?))
    }

    pub fn static_macs(&self) -> StaticMacs {
        StaticMacs::for_graph(&self.graph, NUM_CLASSES)
    }
}
