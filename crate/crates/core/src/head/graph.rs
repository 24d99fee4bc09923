//! Routing-space structure: `(scale, depth)` nodes and the paths between them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::gates::GateKind;

/// Pyramid scale index (0 = finest) and router depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub scale: usize,
    pub depth: usize,
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}d{}", self.scale, self.depth)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    /// Same scale, next depth: residual two-conv block.
    Depth,
    /// Into the next finer scale (bilinear up-sampling).
    ScaleUp,
    /// Into the next coarser scale (down-sampling).
    ScaleDown,
}

impl PathKind {
    pub const ALL: [PathKind; 3] = [PathKind::Depth, PathKind::ScaleUp, PathKind::ScaleDown];

    pub fn name(self) -> &'static str {
        match self {
            PathKind::Depth => "depth",
            PathKind::ScaleUp => "scale_up",
            PathKind::ScaleDown => "scale_down",
        }
    }

    /// Number of stacked 3x3 convs, i.e. the mask dilation depth.
    pub fn conv_depth(self) -> usize {
        match self {
            PathKind::Depth => 2,
            PathKind::ScaleUp | PathKind::ScaleDown => 1,
        }
    }

    pub fn is_depthwise(self) -> bool {
        !matches!(self, PathKind::Depth)
    }
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathSpec {
    pub kind: PathKind,
    pub conv_depth: usize,
    pub channels: usize,
    pub depthwise: bool,
}

impl PathSpec {
    pub fn new(kind: PathKind, channels: usize) -> Self {
        PathSpec { kind, conv_depth: kind.conv_depth(), channels, depthwise: kind.is_depthwise() }
    }

    /// Weight shapes of the path's convs, in execution order.
    pub fn conv_shapes(&self) -> Vec<([usize; 4], usize)> {
        let c = self.channels;
        if self.depthwise {
            vec![([c, 1, 3, 3], c); self.conv_depth]
        } else {
            vec![([c, c, 3, 3], 1); self.conv_depth]
        }
    }

    /// Multiply-accumulates per enabled location.
    pub fn macs_per_location(&self) -> u64 {
        self.conv_shapes().iter().map(|&(s, g)| crate::sparse::macs_per_location(s, g)).sum()
    }
}

/// How gate values are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Spatial gates computed from the features.
    #[default]
    Learned,
    /// Every gate is exactly 1 (the static head).
    ForceOpen,
    /// Every gate is exactly 0.
    ForceClosed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub tau: f64,
    pub coarse: bool,
    pub activation: GateKind,
    pub mode: GateMode,
    /// Initial gate bias offset above `tau`.
    pub init_open: f64,
    pub init_std: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            tau: crate::gates::DEFAULT_TAU,
            coarse: false,
            activation: GateKind::Delta,
            mode: GateMode::Learned,
            init_open: 1.0,
            init_std: 0.01,
        }
    }
}

/// Head hyper-parameters (`head.*`, `gate.*`, `paths.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub depth: usize,
    pub scales: usize,
    pub channels: usize,
    pub gn_groups: usize,
    pub gate: GateConfig,
    pub enable_depth: bool,
    pub enable_scale: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            depth: 2,
            scales: 3,
            channels: 32,
            gn_groups: 8,
            gate: GateConfig::default(),
            enable_depth: true,
            enable_scale: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.scales == 0 || self.channels == 0 {
            return invalid("head", "depth, scales and channels must be positive");
        }
        if self.gn_groups == 0 || self.channels % self.gn_groups != 0 {
            return invalid(
                "head",
                format!("channels {} not divisible by gn_groups {}", self.channels, self.gn_groups),
            );
        }
        crate::gates::GateActivationConfig::new(self.gate.tau)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterNode {
    pub id: NodeId,
    pub paths: Vec<PathSpec>,
    /// Sources feeding this node's accumulation, in accumulation order.
    pub incoming: Vec<(NodeId, PathKind)>,
}

impl RouterNode {
    pub fn path(&self, kind: PathKind) -> Option<&PathSpec> {
        self.paths.iter().find(|p| p.kind == kind)
    }
}

/// Routers for depths `0..D` at every scale plus the resolution chain.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingGraph {
    pub config: HeadConfig,
    resolutions: Vec<(usize, usize)>,
    nodes: Vec<RouterNode>,
}

impl RoutingGraph {
    /// `resolutions[s]` is the `(H, W)` of scale `s`, finest first; each
    /// must be exactly half the previous one.
    pub fn new(config: HeadConfig, resolutions: &[(usize, usize)]) -> Result<Self> {
        config.validate()?;
        if resolutions.len() != config.scales {
            return shape_err(
                "routing_graph",
                format!("{} resolutions for {} scales", resolutions.len(), config.scales),
            );
        }
        for pair in resolutions.windows(2) {
            let ((h0, w0), (h1, w1)) = (pair[0], pair[1]);
            if h0 != 2 * h1 || w0 != 2 * w1 {
                return shape_err(
                    "routing_graph",
                    format!("adjacent scales must differ by exactly 2x, got {h0}x{w0} then {h1}x{w1}"),
                );
            }
        }
        let mut nodes = Vec::new();
        for depth in 0..config.depth {
            for scale in 0..config.scales {
                let id = NodeId { scale, depth };
                let mut paths = Vec::new();
                if config.enable_depth {
                    paths.push(PathSpec::new(PathKind::Depth, config.channels));
                }
                if config.enable_scale {
                    if scale > 0 {
                        paths.push(PathSpec::new(PathKind::ScaleUp, config.channels));
                    }
                    if scale + 1 < config.scales {
                        paths.push(PathSpec::new(PathKind::ScaleDown, config.channels));
                    }
                }
                let mut incoming = Vec::new();
                if depth > 0 {
                    let d = depth - 1;
                    if config.enable_depth {
                        incoming.push((NodeId { scale, depth: d }, PathKind::Depth));
                    }
                    if config.enable_scale {
                        if scale + 1 < config.scales {
                            incoming.push((NodeId { scale: scale + 1, depth: d }, PathKind::ScaleUp));
                        }
                        if scale > 0 {
                            incoming.push((NodeId { scale: scale - 1, depth: d }, PathKind::ScaleDown));
                        }
                    }
                }
                nodes.push(RouterNode { id, paths, incoming });
            }
        }
        Ok(RoutingGraph { config, resolutions: resolutions.to_vec(), nodes })
    }

    pub fn resolution(&self, scale: usize) -> (usize, usize) {
        self.resolutions[scale]
    }

    pub fn resolutions(&self) -> &[(usize, usize)] {
        &self.resolutions
    }

    pub fn nodes(&self) -> &[RouterNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &RouterNode {
        &self.nodes[id.depth * self.config.scales + id.scale]
    }

    /// Destination of `kind` leaving `from`.
    pub fn target(from: NodeId, kind: PathKind) -> NodeId {
        let depth = from.depth + 1;
        match kind {
            PathKind::Depth => NodeId { scale: from.scale, depth },
            PathKind::ScaleUp => NodeId { scale: from.scale - 1, depth },
            PathKind::ScaleDown => NodeId { scale: from.scale + 1, depth },
        }
    }

    /// Sources accumulated into the head output at `scale` (depth `D`).
    pub fn output_sources(&self, scale: usize) -> Vec<(NodeId, PathKind)> {
        let d = self.config.depth - 1;
        let mut v = Vec::new();
        if self.config.enable_depth {
            v.push((NodeId { scale, depth: d }, PathKind::Depth));
        }
        if self.config.enable_scale {
            if scale + 1 < self.config.scales {
                v.push((NodeId { scale: scale + 1, depth: d }, PathKind::ScaleUp));
            }
            if scale > 0 {
                v.push((NodeId { scale: scale - 1, depth: d }, PathKind::ScaleDown));
            }
        }
        v
    }
}
