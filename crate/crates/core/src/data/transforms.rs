//! Deterministic domain transforms. Labels are never touched.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::networks::ImageShape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// Quarter turn counter-clockwise.
    Rotate90,
    /// `v ↦ −v`.
    Invert,
    /// Gray value `v` becomes `v + ½(1 − |v|)·cos(hue + 2πk/3)` in channel
    /// `k`; the three offsets cancel, so the per-pixel channel mean is `v`.
    /// Multi-channel input is first reduced to its channel mean.
    Colorize { hue: f64 },
}

impl Transform {
    pub fn output_shape(&self, s: &ImageShape) -> ImageShape {
        match self {
            Transform::Rotate90 => ImageShape::new(s.channels, s.width, s.height),
            Transform::Invert => *s,
            Transform::Colorize { .. } => ImageShape::new(3, s.height, s.width),
        }
    }

    /// Applies the transform to an (n, c, h, w) batch.
    pub fn apply(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (n, c, h, w) = match *images.shape() {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "transform expects (n, c, h, w), got {:?}",
                    images.shape()
                )))
            }
        };
        let d = images.data();
        match self {
            Transform::Invert => {
                Tensor::new(images.shape().to_vec(), d.iter().map(|v| -v).collect())
            }
            Transform::Rotate90 => {
                // out[y', x'] with out height w, width h: out[y'][x'] = in[x'][w-1-y']
                let mut out = vec![0.0; d.len()];
                for plane in 0..n * c {
                    let src = &d[plane * h * w..(plane + 1) * h * w];
                    let dst = &mut out[plane * h * w..(plane + 1) * h * w];
                    for yo in 0..w {
                        for xo in 0..h {
                            dst[yo * h + xo] = src[xo * w + (w - 1 - yo)];
                        }
                    }
                }
                Tensor::new([n, c, w, h], out)
            }
            Transform::Colorize { hue } => {
                let plane = h * w;
                let offsets: Vec<f64> = (0..3)
                    .map(|k| (hue + 2.0 * PI * k as f64 / 3.0).cos())
                    .collect();
                let mut out = Vec::with_capacity(n * 3 * plane);
                for s in 0..n {
                    let img = &d[s * c * plane..(s + 1) * c * plane];
                    let gray: Vec<f64> = (0..plane)
                        .map(|i| {
                            (0..c).map(|ch| img[ch * plane + i] as f64).sum::<f64>() / c as f64
                        })
                        .collect();
                    for off in &offsets {
                        out.extend(
                            gray.iter()
                                .map(|&v| (v + 0.5 * (1.0 - v.abs()) * off) as f32),
                        );
                    }
                }
                Tensor::new([n, 3, h, w], out)
            }
        }
    }
}

/// Applies a chain of transforms, left to right.
pub fn transform_domain(ds: &Dataset, chain: &[Transform]) -> Result<Dataset> {
    let mut images = ds.images.clone();
    let mut shape = ds.image;
    for t in chain {
        images = t.apply(&images)?;
        shape = t.output_shape(&shape);
    }
    Dataset::new(shape, images, ds.labels.clone(), ds.classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn invert_is_an_involution() {
        let x = random([3, 2, 4, 5], 1);
        let y = Transform::Invert
            .apply(&Transform::Invert.apply(&x).unwrap())
            .unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let x = random([2, 1, 4, 6], 2);
        let mut y = x.clone();
        for _ in 0..4 {
            y = Transform::Rotate90.apply(&y).unwrap();
        }
        assert_eq!(x, y);
        let once = Transform::Rotate90.apply(&x).unwrap();
        assert_eq!(once.shape(), &[2, 1, 6, 4]);
    }

    #[test]
    fn quarter_turn_moves_top_right_to_top_left() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = Transform::Rotate90.apply(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn colorize_preserves_mean_luminance_and_range() {
        let x = random([4, 1, 6, 6], 3);
        for hue in [0.0, 1.3, 4.0] {
            let y = Transform::Colorize { hue }.apply(&x).unwrap();
            assert_eq!(y.shape(), &[4, 3, 6, 6]);
            assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            for s in 0..4 {
                let m_in: f64 = x.data()[s * 36..(s + 1) * 36]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / 36.0;
                let m_out: f64 = y.data()[s * 108..(s + 1) * 108]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / 108.0;
                assert!((m_in - m_out).abs() < 1e-6, "{m_in} vs {m_out}");
            }
        }
        // already colored input is reduced to gray first
        let rgb = random([1, 3, 4, 4], 4);
        let y = Transform::Colorize { hue: 0.5 }.apply(&rgb).unwrap();
        let m_in: f64 = rgb.data().iter().map(|&v| v as f64).sum::<f64>() / 48.0;
        let m_out: f64 = y.data().iter().map(|&v| v as f64).sum::<f64>() / 48.0;
        assert!((m_in - m_out).abs() < 1e-6);
    }
}
