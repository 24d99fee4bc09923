//! Gate activation and the spatial-gate network.
//!
//! The activation is `δ(v) = max(0, (tanh(v − τ) + tanh τ) / (1 + tanh τ))`.
//! It is exactly zero for `v ≤ 0`, saturates at one, and its slope at `0+`
//! is `1 − tanh τ`, so larger `τ` softens the kink at the origin.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::head::graph::{NodeId, PathKind};
use crate::tensor::Tensor;

/// Default `τ`.
pub const DEFAULT_TAU: f64 = 1.5;

#[inline]
pub fn delta(v: f64, tau: f64) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    let t = tau.tanh();
    (((v - tau).tanh() + t) / (1.0 + t)).clamp(0.0, 1.0)
}

/// Derivative of [`delta`]; the subgradient at `v = 0` is taken as 0.
#[inline]
pub fn delta_grad(v: f64, tau: f64) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    let th = (v - tau).tanh();
    (1.0 - th * th) / (1.0 + tau.tanh())
}

/// Which gate nonlinearity the routers use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// `δ` above, with the configured `τ`.
    #[default]
    Delta,
    /// Softmax over the router's paths at every location. Never produces
    /// exact zeros, so nothing is skipped; kept for ablations only.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateActivationConfig {
    tau: f64,
}

impl GateActivationConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau < 0.0 {
            return invalid("gate", format!("tau must be finite and non-negative, got {tau}"));
        }
        Ok(GateActivationConfig { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

impl Default for GateActivationConfig {
    fn default() -> Self {
        GateActivationConfig { tau: DEFAULT_TAU }
    }
}

pub fn gate_activation(v: &Tensor, cfg: GateActivationConfig) -> Tensor {
    v.map(|x| delta(x, cfg.tau))
}

pub fn gate_activation_grad(v: &Tensor, cfg: GateActivationConfig) -> Tensor {
    v.map(|x| delta_grad(x, cfg.tau))
}

/// Per-location gate values of one path at one node.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingMap {
    values: Tensor,
    pub path: PathKind,
    pub node: NodeId,
}

impl GatingMap {
    pub fn new(values: Tensor, path: PathKind, node: NodeId) -> Result<Self> {
        if values.channels() != 1 {
            return shape_err("GatingMap", format!("expected one channel, got {}", values.channels()));
        }
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid("GatingMap", format!("gate value {v} outside [0, 1]"));
        }
        Ok(GatingMap { values, path, node })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Fraction of locations with a positive gate.
    pub fn density(&self) -> f64 {
        self.values.data().iter().filter(|&&v| v > 0.0).count() as f64 / self.values.len() as f64
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0)
    }
}

/// One `C → 1` 3x3 convolution feeding the gate activation.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGateParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl SpatialGateParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [cout, _, kh, kw] = weight.shape();
        if cout != 1 || (kh, kw) != (3, 3) || bias.len() != 1 {
            return shape_err(
                "SpatialGateParams",
                format!("need weight [1, C, 3, 3] and one bias, got {:?} / {}", weight.shape(), bias.len()),
            );
        }
        Ok(SpatialGateParams { weight, bias })
    }
}

/// Gate pre-activation: the 3x3 conv, optionally followed by global average
/// pooling (the coarse-grained variant).
pub fn gate_logits(tape: &mut Tape, x: Var, weight: Var, bias: Var, coarse: bool) -> Result<Var> {
    if tape.value(weight).shape()[0] != 1 {
        return shape_err("spatial_gate", "gate conv must have exactly one output channel");
    }
    let v = tape.conv2d(x, weight, Some(bias), 1)?;
    if coarse {
        tape.spatial_mean(v)
    } else {
        Ok(v)
    }
}

/// `δ(conv3x3(x))` recorded on `tape`.
pub fn spatial_gate(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    bias: Var,
    cfg: GateActivationConfig,
    coarse: bool,
) -> Result<Var> {
    let v = gate_logits(tape, x, weight, bias, coarse)?;
    tape.gate_activation(v, cfg.tau)
}

fn eval_gate(x: &Tensor, params: &SpatialGateParams, cfg: GateActivationConfig, coarse: bool) -> Result<Tensor> {
    if params.weight.shape()[1] != x.channels() {
        return shape_err(
            "spatial_gate",
            format!("gate expects {} channels, input has {}", params.weight.shape()[1], x.channels()),
        );
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(params.weight.clone());
    let b = tape.constant(params.bias.clone());
    let m = spatial_gate(&mut tape, xv, w, b, cfg, coarse)?;
    Ok(tape.value(m).clone())
}

/// Fine-grained gate: one value per location.
pub fn spatial_gate_forward(
    x: &Tensor,
    params: &SpatialGateParams,
    cfg: GateActivationConfig,
    path: PathKind,
    node: NodeId,
) -> Result<GatingMap> {
    GatingMap::new(eval_gate(x, params, cfg, false)?, path, node)
}

/// Coarse-grained gate: spatially constant per sample.
pub fn coarse_gate_forward(
    x: &Tensor,
    params: &SpatialGateParams,
    cfg: GateActivationConfig,
    path: PathKind,
    node: NodeId,
) -> Result<GatingMap> {
    GatingMap::new(eval_gate(x, params, cfg, true)?, path, node)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn range_and_dead_zone(v in -50.0f64..50.0, tau in 0.0f64..4.0) {
            let d = delta(v, tau);
            prop_assert!((0.0..=1.0).contains(&d));
            if v <= 0.0 { prop_assert_eq!(d, 0.0); }
        }

        #[test]
        fn monotone_in_v(v in -5.0f64..8.0, dv in 1e-3f64..2.0, tau in 0.0f64..4.0) {
            let (a, b) = (delta(v, tau), delta(v + dv, tau));
            prop_assert!(b >= a);
            if v > 0.0 && v + dv < 15.0 { prop_assert!(b > a); }
        }

        #[test]
        fn lipschitz_across_origin(v in -1.0f64..1.0, h in -0.5f64..0.5, tau in 0.0f64..4.0) {
            // sup |δ'| = 1 / (1 + tanh τ), attained at v = τ.
            let sup = 1.0 / (1.0 + tau.tanh());
            prop_assert!((delta(v + h, tau) - delta(v, tau)).abs() <= h.abs() * sup + 1e-15);
        }

        #[test]
        fn non_increasing_in_tau(v in 1e-3f64..10.0, tau in 0.0f64..4.0, dt in 1e-3f64..1.0) {
            prop_assert!(delta(v, tau + dt) <= delta(v, tau) + 1e-15);
        }
    }
}
