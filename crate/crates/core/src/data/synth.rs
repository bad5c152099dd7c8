//! Synthetic segmentation task: bright ellipses and rectangles on a dark,
//! noisy background.

use serde::{Deserialize, Serialize};

use super::image::GrayImage;
use super::{SegSample, Source};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub kinds: Vec<ShapeKind>,
    /// Shape extent (ellipse radius, rectangle half side) as a fraction of
    /// the smaller canvas side.
    pub min_extent: f64,
    pub max_extent: f64,
    pub background: [f64; 2],
    /// Foreground brightness above the background.
    pub contrast: [f64; 2],
    pub noise_sigma: f64,
    #[serde(rename = "synth_seed")]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: [64, 64],
            min_shapes: 1,
            max_shapes: 3,
            kinds: vec![ShapeKind::Ellipse, ShapeKind::Rectangle],
            min_extent: 0.08,
            max_extent: 0.25,
            background: [0.05, 0.3],
            contrast: [0.35, 0.6],
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.size[0] == 0 || self.size[1] == 0 {
            return bad(format!("canvas {}×{} is empty", self.size[0], self.size[1]));
        }
        if self.min_shapes == 0 || self.max_shapes < self.min_shapes {
            return bad(format!(
                "shape count range {}..={} must start at 1 or more",
                self.min_shapes, self.max_shapes
            ));
        }
        if self.kinds.is_empty() {
            return bad("no shape kinds".into());
        }
        if !(self.min_extent > 0.0 && self.min_extent <= self.max_extent && self.max_extent <= 0.5) {
            return bad(format!(
                "extent range {}..{} outside (0, 0.5]",
                self.min_extent, self.max_extent
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {} must be non-negative", self.noise_sigma));
        }
        for (name, [lo, hi]) in [("background", self.background), ("contrast", self.contrast)] {
            if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
                return bad(format!("{name} range [{lo}, {hi}] must be ordered within [0, 1]"));
            }
        }
        Ok(())
    }
}

/// A shape with real-valued geometry in pixel-center coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    /// Radii for ellipses, half sides for rectangles (row, column).
    pub extent: (f64, f64),
}

impl Shape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 - self.center.0) / self.extent.0;
        let dx = (x as f64 - self.center.1) / self.extent.1;
        match self.kind {
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
            ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        }
    }

    pub fn rasterize(&self, (h, w): (usize, usize)) -> Vec<bool> {
        (0..h * w).map(|i| self.contains(i / w, i % w)).collect()
    }
}

const MAX_TRIES: usize = 100;

fn draw_shape(cfg: &SynthConfig, rng: &mut Rng) -> Result<Shape> {
    let [h, w] = cfg.size;
    let side = h.min(w) as f64;
    for _ in 0..MAX_TRIES {
        let kind = cfg.kinds[rng.int_inclusive(0, cfg.kinds.len() - 1)];
        let ey = rng.uniform(cfg.min_extent, cfg.max_extent) * side;
        let ex = rng.uniform(cfg.min_extent, cfg.max_extent) * side;
        // keep the whole shape on the canvas and at least one pixel wide
        if ey < 1.0 || ex < 1.0 || 2.0 * ey > (h - 1) as f64 || 2.0 * ex > (w - 1) as f64 {
            continue;
        }
        let cy = rng.uniform(ey, (h - 1) as f64 - ey);
        let cx = rng.uniform(ex, (w - 1) as f64 - ex);
        return Ok(Shape {
            kind,
            center: (cy, cx),
            extent: (ey, ex),
        });
    }
    Err(Error::Config(format!(
        "synth: no shape fits a {h}×{w} canvas after {MAX_TRIES} attempts"
    )))
}

/// Renders one sample from its shapes. Pixels are quantized to 8 bits so
/// that writing the sample to disk and reading it back is lossless.
pub fn render(cfg: &SynthConfig, shapes: &[Shape], rng: &mut Rng, id: String) -> Result<SegSample> {
    let [h, w] = cfg.size;
    let bg = rng.uniform(cfg.background[0], cfg.background[1]);
    let fg = bg + rng.uniform(cfg.contrast[0], cfg.contrast[1]);
    let mut mask = vec![false; h * w];
    for s in shapes {
        for (m, inside) in mask.iter_mut().zip(s.rasterize((h, w))) {
            *m |= inside;
        }
    }
    let values: Vec<f64> = mask
        .iter()
        .map(|&m| {
            let base = if m { fg } else { bg };
            let noise = if cfg.noise_sigma > 0.0 {
                rng.normal(0.0, cfg.noise_sigma)
            } else {
                0.0
            };
            base + noise
        })
        .collect();
    let image = GrayImage::from_unit(&values, h, w)?;
    let mask = GrayImage::new(h, w, mask.iter().map(|&m| if m { 255 } else { 0 }).collect())?;
    SegSample::from_images(id, &image, &mask, Source::Synthetic)
}

/// The `index`-th sample of the dataset defined by `cfg`; depends only on
/// `(cfg.seed, index)`.
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> Result<SegSample> {
    let mut rng = Rng::derive(cfg.seed, index as u64);
    let n = rng.int_inclusive(cfg.min_shapes, cfg.max_shapes);
    let shapes = (0..n).map(|_| draw_shape(cfg, &mut rng)).collect::<Result<Vec<_>>>()?;
    render(cfg, &shapes, &mut rng, format!("s{index:05}"))
}

pub fn synth_generate(cfg: &SynthConfig, n: usize) -> Result<Vec<SegSample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("synth: sample count must be at least 1".into()));
    }
    (0..n).map(|i| synth_sample(cfg, i)).collect()
}
