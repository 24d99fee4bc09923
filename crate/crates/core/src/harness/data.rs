//! Synthetic desk-scale detection scenes: squares and discs of sizes
//! spanning several octaves on a noisy background, with per-level
//! classification and box targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

use super::config::DataSection;

/// Background plus two object classes.
pub const NUM_CLASSES: usize = 3;
pub const BACKGROUND: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disc,
}

impl Shape {
    pub fn class(self) -> usize {
        match self {
            Shape::Square => 1,
            Shape::Disc => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Object {
    pub shape: Shape,
    /// Center in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Side length or diameter in pixels.
    pub size: f64,
}

impl Object {
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let r = self.size / 2.0;
        (self.cx - r, self.cy - r, self.cx + r, self.cy + r)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let r = self.size / 2.0;
        match self.shape {
            Shape::Square => (x - self.cx).abs() <= r && (y - self.cy).abs() <= r,
            Shape::Disc => (x - self.cx).powi(2) + (y - self.cy).powi(2) <= r * r,
        }
    }
}

/// Training targets at one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Class per cell, row-major.
    pub classes: Vec<usize>,
    /// `[1, 4, h, w]` box offsets `(l, t, r, b) / (2 · stride)`; zero on background.
    pub reg: Tensor,
}

impl LevelTargets {
    pub fn foreground(&self) -> usize {
        self.classes.iter().filter(|&&c| c != BACKGROUND).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: usize,
    /// `[1, channels, size, size]`.
    pub image: Tensor,
    pub objects: Vec<Object>,
    /// Pyramid level each object is assigned to.
    pub levels: Vec<usize>,
    pub targets: Vec<LevelTargets>,
}

/// Pyramid level for an object of the given size: the stride nearest half
/// the size in log space, ties going to the finer level.
pub fn assign_level(size: f64, strides: &[usize]) -> Result<usize> {
    if !(size > 0.0) || !size.is_finite() {
        return invalid("assign_level", format!("object size {size} must be positive"));
    }
    if strides.is_empty() {
        return invalid("assign_level", "no pyramid levels");
    }
    let want = (size / 2.0).log2();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (l, &s) in strides.iter().enumerate() {
        let d = ((s as f64).log2() - want).abs();
        if d < best_d - 1e-12 {
            best = l;
            best_d = d;
        }
    }
    Ok(best)
}

/// Per-level targets. A cell is positive for an object assigned to its level
/// when its center lies inside the object; later objects overwrite earlier
/// ones. An object covering no cell center claims the cell under its center.
pub fn build_targets(objects: &[Object], levels: &[usize], image_size: usize, strides: &[usize]) -> Vec<LevelTargets> {
    strides
        .iter()
        .enumerate()
        .map(|(l, &stride)| {
            let h = image_size / stride;
            let w = h;
            let mut classes = vec![BACKGROUND; h * w];
            let mut owner: Vec<Option<usize>> = vec![None; h * w];
            for (i, o) in objects.iter().enumerate() {
                if levels[i] != l {
                    continue;
                }
                let mut hit = false;
                for y in 0..h {
                    for x in 0..w {
                        let (px, py) = ((x as f64 + 0.5) * stride as f64, (y as f64 + 0.5) * stride as f64);
                        if o.contains(px, py) {
                            owner[y * w + x] = Some(i);
                            hit = true;
                        }
                    }
                }
                if !hit {
                    let x = ((o.cx / stride as f64) as usize).min(w - 1);
                    let y = ((o.cy / stride as f64) as usize).min(h - 1);
                    owner[y * w + x] = Some(i);
                }
            }
            let mut reg = Tensor::zeros([1, 4, h, w]);
            let norm = 2.0 * stride as f64;
            for y in 0..h {
                for x in 0..w {
                    if let Some(i) = owner[y * w + x] {
                        let o = &objects[i];
                        let (x0, y0, x1, y1) = o.bbox();
                        let (px, py) = ((x as f64 + 0.5) * stride as f64, (y as f64 + 0.5) * stride as f64);
                        classes[y * w + x] = o.shape.class();
                        for (c, v) in [px - x0, py - y0, x1 - px, y1 - py].into_iter().enumerate() {
                            reg.set(0, c, y, x, v / norm);
                        }
                    }
                }
            }
            LevelTargets { stride, height: h, width: w, classes, reg }
        })
        .collect()
}

fn render(objects: &[Object], intensities: &[f64], cfg: &DataSection, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let s = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| crate::Error::Config(e.to_string()))?;
    let mut img = Tensor::zeros([1, cfg.image_channels, s, s]);
    for c in 0..cfg.image_channels {
        for y in 0..s {
            for x in 0..s {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut v = 0.0;
                for (o, &a) in objects.iter().zip(intensities) {
                    if o.contains(px, py) {
                        v = a;
                    }
                }
                img.set(0, c, y, x, v + noise.sample(rng));
            }
        }
    }
    Ok(img)
}

fn validate(cfg: &DataSection, strides: &[usize]) -> Result<()> {
    if cfg.min_objects > cfg.max_objects {
        return invalid("data", format!("object count range {}..={}", cfg.min_objects, cfg.max_objects));
    }
    if !(cfg.min_size > 0.0) || cfg.min_size > cfg.max_size || cfg.max_size > cfg.image_size as f64 {
        return invalid(
            "data",
            format!("object sizes {}..{} must be positive and fit a {} image", cfg.min_size, cfg.max_size, cfg.image_size),
        );
    }
    if let Some(&s) = strides.iter().find(|&&s| s == 0 || cfg.image_size % s != 0) {
        return invalid("data", format!("stride {s} does not divide image size {}", cfg.image_size));
    }
    Ok(())
}

/// `count` scenes from `seed`; scene `i` always gets id `i`.
pub fn gen_synthetic(seed: u64, count: usize, cfg: &DataSection, strides: &[usize]) -> Result<Vec<Scene>> {
    validate(cfg, strides)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (cfg.min_size.ln(), cfg.max_size.ln());
    let mut scenes = Vec::with_capacity(count);
    for id in 0..count {
        let k = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut objects = Vec::with_capacity(k);
        let mut intensities = Vec::with_capacity(k);
        for _ in 0..k {
            let size = if hi > lo { rng.random_range(lo..hi).exp() } else { cfg.min_size };
            let r = size / 2.0;
            let span = cfg.image_size as f64 - size;
            let cx = r + if span > 0.0 { rng.random_range(0.0..span) } else { 0.0 };
            let cy = r + if span > 0.0 { rng.random_range(0.0..span) } else { 0.0 };
            let shape = if rng.random_bool(0.5) { Shape::Square } else { Shape::Disc };
            objects.push(Object { shape, cx, cy, size });
            intensities.push(rng.random_range(0.5..1.0));
        }
        let levels = objects.iter().map(|o| assign_level(o.size, strides)).collect::<Result<Vec<_>>>()?;
        let image = render(&objects, &intensities, cfg, &mut rng)?;
        let targets = build_targets(&objects, &levels, cfg.image_size, strides);
        scenes.push(Scene { id, image, objects, levels, targets });
    }
    Ok(scenes)
}

/// Stacks scene images into one batch tensor.
pub fn batch_images(scenes: &[&Scene]) -> Result<Tensor> {
    let imgs: Vec<Tensor> = scenes.iter().map(|s| s.image.clone()).collect();
    Tensor::concat_batch(&imgs)
}
