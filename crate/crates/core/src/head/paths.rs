//! The three routing paths. Each takes an optional mask; `None` runs the
//! convs densely (the static head).

use crate::autodiff::{Direction, ParameterSet, Tape, Var};
use crate::error::{shape_err, Result};
use crate::sparse::{self, SpatialMask};

use super::graph::PathKind;

pub const GN_EPS: f64 = 1e-5;

pub fn param_prefix(depth: usize, kind: PathKind) -> String {
    format!("head.d{depth}.{}", kind.name())
}

pub fn gate_prefix(depth: usize, kind: PathKind) -> String {
    format!("head.d{depth}.gate.{}", kind.name())
}

fn conv(
    tape: &mut Tape,
    x: Var,
    w: Var,
    groups: usize,
    mask: Option<&SpatialMask>,
) -> Result<Var> {
    match mask {
        Some(m) => sparse::sparse_conv(tape, x, w, None, groups, m),
        None => tape.conv2d(x, w, None, groups),
    }
}

fn gn(tape: &mut Tape, params: &ParameterSet, prefix: &str, x: Var, groups: usize) -> Result<Var> {
    let gamma = tape.param(params, &format!("{prefix}.gamma"))?;
    let beta = tape.param(params, &format!("{prefix}.beta"))?;
    tape.group_norm(x, gamma, beta, groups, GN_EPS)
}

/// `x + GN(conv(ReLU(GN(conv(x)))))`, both convs restricted to `mask`.
pub fn depth_path(
    tape: &mut Tape,
    params: &ParameterSet,
    depth: usize,
    x: Var,
    mask: Option<&SpatialMask>,
    gn_groups: usize,
) -> Result<Var> {
    let p = param_prefix(depth, PathKind::Depth);
    let w1 = tape.param(params, &format!("{p}.conv1.weight"))?;
    let w2 = tape.param(params, &format!("{p}.conv2.weight"))?;
    let h = conv(tape, x, w1, 1, mask)?;
    let h = gn(tape, params, &format!("{p}.gn1"), h, gn_groups)?;
    let h = tape.relu(h)?;
    let h = conv(tape, h, w2, 1, mask)?;
    let h = gn(tape, params, &format!("{p}.gn2"), h, gn_groups)?;
    tape.add(x, h)
}

/// Depthwise conv → GN → ReLU at the source resolution (before resampling).
pub fn scale_path_body(
    tape: &mut Tape,
    params: &ParameterSet,
    depth: usize,
    kind: PathKind,
    x: Var,
    mask: Option<&SpatialMask>,
    gn_groups: usize,
) -> Result<Var> {
    debug_assert!(kind != PathKind::Depth);
    let p = param_prefix(depth, kind);
    let c = tape.value(x).channels();
    let w = tape.param(params, &format!("{p}.conv.weight"))?;
    let h = conv(tape, x, w, c, mask)?;
    let h = gn(tape, params, &format!("{p}.gn"), h, gn_groups)?;
    tape.relu(h)
}

pub fn direction(kind: PathKind) -> Direction {
    match kind {
        PathKind::ScaleUp => Direction::Up,
        _ => Direction::Down,
    }
}

/// Full scale path: body followed by the factor-2 resample.
pub fn scale_path(
    tape: &mut Tape,
    params: &ParameterSet,
    depth: usize,
    kind: PathKind,
    x: Var,
    mask: Option<&SpatialMask>,
    gn_groups: usize,
) -> Result<Var> {
    let [_, _, h, w] = tape.value(x).shape();
    if kind == PathKind::ScaleDown && (h % 2 != 0 || w % 2 != 0) {
        return shape_err("scale_path", format!("down path needs even dims, got {h}x{w}"));
    }
    let body = scale_path_body(tape, params, depth, kind, x, mask, gn_groups)?;
    tape.resample(body, direction(kind))
}
