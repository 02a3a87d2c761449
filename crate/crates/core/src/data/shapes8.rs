//! Eight glyphs on a ring: the mode index is the ring position. Source and
//! target domains differ only in glyph type (square vs disk).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::networks::ImageShape;

pub const MODES: usize = 8;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    Square,
    Disk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Shapes8Spec {
    pub size: usize,
    pub ring_radius: f64,
    /// Half side of a square, radius of a disk.
    pub glyph_half: f64,
    pub glyph: Glyph,
    pub intensity: f64,
    /// Std of the per-sample intensity jitter.
    pub intensity_sigma: f64,
    /// Uniform position jitter, ± pixels on each axis.
    pub position_jitter: f64,
}

impl Default for Shapes8Spec {
    fn default() -> Self {
        Self {
            size: 16,
            ring_radius: 5.0,
            glyph_half: 1.25,
            glyph: Glyph::Square,
            intensity: 0.8,
            intensity_sigma: 0.1,
            position_jitter: 0.1,
        }
    }
}

impl Shapes8Spec {
    pub fn with_glyph(glyph: Glyph) -> Self {
        Self {
            glyph,
            ..Self::default()
        }
    }

    fn circumradius(&self) -> f64 {
        match self.glyph {
            Glyph::Square => self.glyph_half * 2f64.sqrt(),
            Glyph::Disk => self.glyph_half,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 4 || !(self.glyph_half > 0.0) || !(self.ring_radius > 0.0) {
            return Err(Error::Config(
                "shapes8: size, glyph and ring must be positive".into(),
            ));
        }
        let reach = self.circumradius() + self.position_jitter.abs();
        let gap = 2.0 * self.ring_radius * (PI / MODES as f64).sin();
        if gap <= 2.0 * reach {
            return Err(Error::Config(format!(
                "shapes8: neighbouring modes overlap (spacing {gap:.3} ≤ glyph extent {:.3})",
                2.0 * reach
            )));
        }
        if self.ring_radius + reach > (self.size as f64 - 1.0) / 2.0 {
            return Err(Error::Config(
                "shapes8: ring does not fit inside the image".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.intensity) || self.intensity_sigma < 0.0 {
            return Err(Error::Config(
                "shapes8: intensity must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> ImageShape {
        ImageShape::new(1, self.size, self.size)
    }

    /// Generating center of a mode in pixel coordinates `(x, y)`.
    pub fn mode_center(&self, mode: usize) -> (f64, f64) {
        let c = (self.size as f64 - 1.0) / 2.0;
        let theta = 2.0 * PI * mode as f64 / MODES as f64;
        (
            c + self.ring_radius * theta.cos(),
            c - self.ring_radius * theta.sin(),
        )
    }

    fn covers(&self, dx: f64, dy: f64) -> bool {
        match self.glyph {
            Glyph::Square => dx.abs() <= self.glyph_half && dy.abs() <= self.glyph_half,
            Glyph::Disk => dx * dx + dy * dy <= self.glyph_half * self.glyph_half,
        }
    }

    /// Antialiased rendering of one glyph onto a `-1` background.
    pub fn render(&self, center: (f64, f64), intensity: f64) -> Vec<f32> {
        let s = self.size;
        let step = 1.0 / SUPERSAMPLE as f64;
        let mut out = Vec::with_capacity(s * s);
        for y in 0..s {
            for x in 0..s {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 - 0.5 + (sx as f64 + 0.5) * step;
                        let py = y as f64 - 0.5 + (sy as f64 + 0.5) * step;
                        if self.covers(px - center.0, py - center.1) {
                            hits += 1;
                        }
                    }
                }
                let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                out.push((-1.0 + cov * (intensity + 1.0)) as f32);
            }
        }
        out
    }
}

/// `n` images, image `i` drawn from mode `i mod 8`.
pub fn gen_shapes8(spec: &Shapes8Spec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, spec.intensity_sigma.max(1e-12)).expect("finite sigma");
    let mut pixels = Vec::with_capacity(n * spec.size * spec.size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mode = i % MODES;
        let (cx, cy) = spec.mode_center(mode);
        let j = spec.position_jitter;
        let (dx, dy) = if j > 0.0 {
            (rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (0.0, 0.0)
        };
        let v = (spec.intensity + jitter.sample(&mut rng)).clamp(0.2, 1.0);
        pixels.extend(spec.render((cx + dx, cy + dy), v));
        labels.push(mode);
    }
    Dataset::new(
        spec.image_shape(),
        Tensor::new([n, 1, spec.size, spec.size], pixels)?,
        labels,
        MODES,
    )
}
