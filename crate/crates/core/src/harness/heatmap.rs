//! Gate heatmaps: one 8-bit binary PGM per (scale, depth, path), an index
//! manifest and a CSV of the raw gate values.
//!
//! PGM layout: the ASCII header `P5\n{width} {height}\n255\n` followed by
//! `width · height` bytes, row-major. Byte 0 means the gate is exactly 0,
//! 255 means exactly 1; anything strictly between maps to `1..=254`.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{ParameterSet, Tape};
use crate::error::{Error, Result};
use crate::head::{NodeId, PathKind};

use super::data::{self, Scene};
use super::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct GateHeatmap {
    pub node: NodeId,
    pub path: PathKind,
    pub width: usize,
    pub height: usize,
    /// Raw gate values, row-major.
    pub values: Vec<f64>,
}

impl GateHeatmap {
    pub fn file_name(&self) -> String {
        format!("gate_{}_{}.pgm", self.node, self.path.name())
    }

    pub fn pixels(&self) -> Vec<u8> {
        self.values.iter().map(|&m| gate_pixel(m)).collect()
    }

    pub fn density(&self) -> f64 {
        self.values.iter().filter(|&&v| v > 0.0).count() as f64 / self.values.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapBundle {
    pub scene_id: usize,
    pub maps: Vec<GateHeatmap>,
}

pub fn gate_pixel(m: f64) -> u8 {
    if m <= 0.0 {
        0
    } else if m >= 1.0 {
        255
    } else {
        (255.0 * m).round().clamp(1.0, 254.0) as u8
    }
}

pub fn to_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses the PGM variant written by [`to_pgm`].
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format(format!("pgm: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos == start || pos >= bytes.len() {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?.to_string());
        pos += 1;
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = &bytes[pos..];
    if body.len() != w * h {
        return Err(bad(&format!("{} pixel bytes for {w}x{h}", body.len())));
    }
    Ok((w, h, body.to_vec()))
}

/// Gate maps of every router for one scene.
pub fn compute_heatmaps(model: &Model, params: &ParameterSet, scene: &Scene) -> Result<HeatmapBundle> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, params, data::batch_images(&[scene])?)?;
    let mut maps = Vec::new();
    for r in &fwd.head.routers {
        for p in &r.paths {
            let m = tape.value(p.gate);
            maps.push(GateHeatmap {
                node: r.node,
                path: p.kind,
                width: m.width(),
                height: m.height(),
                values: m.data().to_vec(),
            });
        }
    }
    Ok(HeatmapBundle { scene_id: scene.id, maps })
}

pub fn index_csv(bundle: &HeatmapBundle) -> String {
    let mut s = String::from("file,scene_id,scale,depth,path,width,height,density\n");
    for m in &bundle.maps {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            m.file_name(),
            bundle.scene_id,
            m.node.scale,
            m.node.depth,
            m.path.name(),
            m.width,
            m.height,
            m.density()
        );
    }
    s
}

/// Raw values; `{}` formatting of f64 round-trips exactly.
pub fn gates_csv(bundle: &HeatmapBundle) -> String {
    let mut s = String::from("scale,depth,path,y,x,value\n");
    for m in &bundle.maps {
        for y in 0..m.height {
            for x in 0..m.width {
                let _ = writeln!(s, "{},{},{},{y},{x},{}", m.node.scale, m.node.depth, m.path.name(), m.values[y * m.width + x]);
            }
        }
    }
    s
}

fn parse_path(name: &str) -> Result<PathKind> {
    PathKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| Error::Format(format!("unknown path `{name}`")))
}

/// Reads [`gates_csv`] output back into `(node, path, values)` in file order.
pub fn read_gates_csv(text: &str) -> Result<Vec<(NodeId, PathKind, Vec<f64>)>> {
    let bad = |line: usize, m: &str| Error::Format(format!("gates csv line {line}: {m}"));
    let mut out: Vec<(NodeId, PathKind, Vec<f64>)> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(i + 1, "expected 6 fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 1, "bad integer"));
        let node = NodeId { scale: num(f[0])?, depth: num(f[1])? };
        let path = parse_path(f[2])?;
        let v: f64 = f[5].parse().map_err(|_| bad(i + 1, "bad value"))?;
        match out.last_mut() {
            Some((n, p, vals)) if *n == node && *p == path => vals.push(v),
            _ => out.push((node, path, vec![v])),
        }
    }
    Ok(out)
}

/// Writes the bundle to `dir`: PGMs, `index.csv` and `gates.csv`.
pub fn write_bundle(bundle: &HeatmapBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for m in &bundle.maps {
        std::fs::write(dir.join(m.file_name()), to_pgm(m.width, m.height, &m.pixels()))?;
    }
    std::fs::write(dir.join("index.csv"), index_csv(bundle))?;
    std::fs::write(dir.join("gates.csv"), gates_csv(bundle))?;
    Ok(())
}

pub fn export_gate_heatmaps(model: &Model, params: &ParameterSet, scene: &Scene, dir: &Path) -> Result<HeatmapBundle> {
    let bundle = compute_heatmaps(model, params, scene)?;
    write_bundle(&bundle, dir)?;
    Ok(bundle)
}
