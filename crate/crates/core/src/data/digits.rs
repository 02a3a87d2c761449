//! Procedural handwritten-style digits: per-class stroke skeletons pushed
//! through a random affine map and rasterized with an antialiased pen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::networks::ImageShape;

pub const CLASSES: usize = 10;

type Stroke = &'static [(f64, f64)];

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, k: usize) -> Vec<(f64, f64)> {
    (0..=k)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Polylines in a unit box, x right, y down.
fn skeleton(digit: usize) -> Vec<Vec<(f64, f64)>> {
    const ONE: [Stroke; 2] = [&[(0.5, 0.08), (0.5, 0.92)], &[(0.32, 0.25), (0.5, 0.08)]];
    const TWO: [Stroke; 1] = [&[
        (0.2, 0.27),
        (0.35, 0.1),
        (0.65, 0.1),
        (0.8, 0.27),
        (0.78, 0.42),
        (0.2, 0.9),
        (0.82, 0.9),
    ]];
    const THREE: [Stroke; 1] = [&[
        (0.2, 0.1),
        (0.8, 0.1),
        (0.48, 0.45),
        (0.78, 0.58),
        (0.8, 0.78),
        (0.62, 0.92),
        (0.2, 0.88),
    ]];
    const FOUR: [Stroke; 1] = [&[(0.66, 0.92), (0.66, 0.08), (0.15, 0.64), (0.86, 0.64)]];
    const FIVE: [Stroke; 1] = [&[
        (0.8, 0.1),
        (0.27, 0.1),
        (0.22, 0.46),
        (0.6, 0.4),
        (0.8, 0.58),
        (0.76, 0.84),
        (0.5, 0.93),
        (0.2, 0.84),
    ]];
    const SIX: [Stroke; 1] = [&[
        (0.74, 0.1),
        (0.42, 0.2),
        (0.22, 0.52),
        (0.24, 0.84),
        (0.5, 0.93),
        (0.76, 0.8),
        (0.76, 0.6),
        (0.5, 0.5),
        (0.23, 0.6),
    ]];
    const SEVEN: [Stroke; 1] = [&[(0.18, 0.1), (0.82, 0.1), (0.4, 0.92)]];
    const NINE: [Stroke; 1] = [&[
        (0.77, 0.4),
        (0.5, 0.5),
        (0.24, 0.4),
        (0.24, 0.18),
        (0.5, 0.07),
        (0.76, 0.18),
        (0.77, 0.4),
        (0.68, 0.92),
    ]];
    let own = |s: &[Stroke]| s.iter().map(|p| p.to_vec()).collect();
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.3, 0.42, 12)],
        1 => own(&ONE),
        2 => own(&TWO),
        3 => own(&THREE),
        4 => own(&FOUR),
        5 => own(&FIVE),
        6 => own(&SIX),
        7 => own(&SEVEN),
        8 => vec![
            ellipse(0.5, 0.28, 0.22, 0.2, 10),
            ellipse(0.5, 0.7, 0.27, 0.22, 10),
        ],
        9 => own(&NINE),
        _ => unreachable!("digit out of range"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DigitSpec {
    pub size: usize,
    /// Glyph box side relative to the image.
    pub scale: f64,
    pub scale_jitter: f64,
    pub rotation_deg: f64,
    pub shear: f64,
    /// ± pixels.
    pub translate: f64,
    /// Pen half-width range in pixels.
    pub stroke: (f64, f64),
}

impl Default for DigitSpec {
    fn default() -> Self {
        Self {
            size: 16,
            scale: 0.72,
            scale_jitter: 0.1,
            rotation_deg: 10.0,
            shear: 0.12,
            translate: 1.0,
            stroke: (0.55, 0.85),
        }
    }
}

impl DigitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8
            || !(self.scale > 0.0)
            || self.stroke.0 <= 0.0
            || self.stroke.1 < self.stroke.0
        {
            return Err(Error::Config(
                "digits: invalid size, scale or stroke range".into(),
            ));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> ImageShape {
        ImageShape::new(1, self.size, self.size)
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn render(spec: &DigitSpec, digit: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = spec.size as f64;
    let side = s * spec.scale * (1.0 + rng.random_range(-spec.scale_jitter..=spec.scale_jitter));
    let rot = rng
        .random_range(-spec.rotation_deg..=spec.rotation_deg)
        .to_radians();
    let shear = rng.random_range(-spec.shear..=spec.shear);
    let (tx, ty) = (
        rng.random_range(-spec.translate..=spec.translate),
        rng.random_range(-spec.translate..=spec.translate),
    );
    let half_w = rng.random_range(spec.stroke.0..=spec.stroke.1);
    let c = (s - 1.0) / 2.0;
    let (cr, sr) = (rot.cos(), rot.sin());
    let map = |(u, v): (f64, f64)| {
        let (x, y) = ((u - 0.5) * side, (v - 0.5) * side);
        let x = x + shear * y;
        (c + tx + cr * x - sr * y, c + ty + sr * x + cr * y)
    };
    let strokes: Vec<Vec<(f64, f64)>> = skeleton(digit)
        .into_iter()
        .map(|st| st.into_iter().map(map).collect())
        .collect();
    let mut out = Vec::with_capacity(spec.size * spec.size);
    for y in 0..spec.size {
        for x in 0..spec.size {
            let p = (x as f64, y as f64);
            let d = strokes
                .iter()
                .flat_map(|st| st.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let ink = (half_w + 0.5 - d).clamp(0.0, 1.0);
            out.push((2.0 * ink - 1.0) as f32);
        }
    }
    out
}

/// `n` digits, image `i` of class `i mod 10`.
pub fn gen_digits(spec: &DigitSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * spec.size * spec.size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let d = i % CLASSES;
        pixels.extend(render(spec, d, &mut rng));
        labels.push(d);
    }
    Dataset::new(
        spec.image_shape(),
        Tensor::new([n, 1, spec.size, spec.size], pixels)?,
        labels,
        CLASSES,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_seeded_bounded() {
        let a = gen_digits(&DigitSpec::default(), 30, 1).unwrap();
        assert_eq!(a.labels[..10], (0..10).collect::<Vec<_>>()[..]);
        assert_eq!(
            a.images,
            gen_digits(&DigitSpec::default(), 30, 1).unwrap().images
        );
        assert!(a.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn every_class_has_ink_inside_the_frame() {
        let ds = gen_digits(&DigitSpec::default(), 100, 2).unwrap();
        for i in 0..100 {
            let img = &ds.images.data()[i * 256..(i + 1) * 256];
            let ink = img.iter().filter(|&&v| v > 0.0).count();
            assert!(
                (8..160).contains(&ink),
                "digit {} has {ink} ink pixels",
                ds.labels[i]
            );
            // border rows stay mostly empty
            let border = (0..16)
                .filter(|&x| img[x] > 0.0 || img[15 * 16 + x] > 0.0)
                .count();
            assert!(border <= 4);
        }
    }

    #[test]
    fn segment_distance_basics() {
        assert_eq!(segment_distance((0.0, 1.0), (0.0, 0.0), (2.0, 0.0)), 1.0);
        assert_eq!(segment_distance((3.0, 0.0), (0.0, 0.0), (2.0, 0.0)), 1.0);
        assert_eq!(segment_distance((1.0, 1.0), (1.0, 1.0), (1.0, 1.0)), 0.0);
    }
}
