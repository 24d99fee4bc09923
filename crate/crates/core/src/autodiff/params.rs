use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Gradients keyed by parameter path.
pub type Gradients = BTreeMap<String, Tensor>;

/// Named parameters plus the momentum buffers of the optimizer, keyed
/// identically. Shapes are fixed at insertion.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
    momentum: BTreeMap<String, Tensor>,
}

/// Momentum SGD hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::KeyMismatch(format!("duplicate parameter `{name}`")));
        }
        self.momentum.insert(name.clone(), Tensor::zeros(t.shape()));
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn momentum(&self, name: &str) -> Option<&Tensor> {
        self.momentum.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn momentum_iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.momentum.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Overwrites a parameter's values; the shape must not change.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::KeyMismatch(format!("unknown parameter `{name}`")))?;
        if slot.shape() != t.shape() {
            return invalid("ParameterSet::set", format!("shape of `{name}` is fixed at {:?}", slot.shape()));
        }
        *slot = t;
        Ok(())
    }

    pub(crate) fn set_momentum(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .momentum
            .get_mut(name)
            .ok_or_else(|| Error::KeyMismatch(format!("unknown parameter `{name}`")))?;
        if slot.shape() != t.shape() {
            return invalid("ParameterSet::set_momentum", format!("shape of `{name}` is fixed at {:?}", slot.shape()));
        }
        *slot = t;
        Ok(())
    }

    /// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
    pub fn sgd_step(&mut self, grads: &Gradients, cfg: SgdConfig) -> Result<()> {
        if grads.len() != self.params.len() || grads.keys().any(|k| !self.params.contains_key(k)) {
            let missing: Vec<_> = self.params.keys().filter(|k| !grads.contains_key(*k)).collect();
            let extra: Vec<_> = grads.keys().filter(|k| !self.params.contains_key(*k)).collect();
            return Err(Error::KeyMismatch(format!("missing grads {missing:?}, unexpected grads {extra:?}")));
        }
        for (name, p) in self.params.iter_mut() {
            let g = &grads[name];
            if g.shape() != p.shape() {
                return invalid("sgd_step", format!("gradient shape {:?} for `{name}` {:?}", g.shape(), p.shape()));
            }
            let v = self.momentum.get_mut(name).expect("momentum keyed like params");
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gv + cfg.weight_decay * *pv;
                *vv = cfg.momentum * *vv + d;
                *pv -= cfg.lr * *vv;
            }
        }
        Ok(())
    }
}

/// Global L2 norm over every gradient tensor, in key order.
pub fn grad_norm(grads: &Gradients) -> f64 {
    grads.values().flat_map(|g| g.data().iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}
