//! Sample-quality metrics computed with a frozen oracle classifier:
//! inception-style score, mode coverage, translated-sample accuracy, and
//! 2-D scatter exports.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::networks::oracle::argmax;
use crate::networks::OracleClassifier;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreReport {
    pub inception_score: f64,
    pub per_class_marginal: Vec<f64>,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeReport {
    pub covered_modes: Vec<usize>,
    pub missing_count: usize,
    pub per_mode_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub top1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// `exp(mean_x KL(p(y|x) ‖ p(y)))` with `p(y)` the mean prediction.
pub fn inception_score_from_probs(probs: &[Vec<f64>]) -> Result<ScoreReport> {
    let n = probs.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let c = probs[0].len();
    if probs.iter().any(|p| p.len() != c) {
        return Err(Error::Shape("ragged probability rows".into()));
    }
    let mut marginal = vec![0.0; c];
    for p in probs {
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v;
        }
    }
    marginal.iter_mut().for_each(|m| *m /= n as f64);
    let mean_kl = probs
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(&q, _)| q > 0.0)
                .map(|(&q, &m)| q * (q.max(PROB_FLOOR).ln() - m.max(PROB_FLOOR).ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    Ok(ScoreReport {
        inception_score: mean_kl.exp(),
        per_class_marginal: marginal,
        n_samples: n,
    })
}

pub fn inception_score(
    samples: &Tensor<f32>,
    oracle: &OracleClassifier<f32>,
) -> Result<ScoreReport> {
    if samples.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyBatch);
    }
    inception_score_from_probs(&oracle.predict_proba(samples)?)
}

/// Every sample is assigned its argmax class; a class is covered when at
/// least one assigned sample has top probability `≥ threshold`.
pub fn missing_modes_from_probs(
    probs: &[Vec<f64>],
    classes: usize,
    threshold: f64,
) -> Result<ModeReport> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "confidence threshold {threshold} outside [0, 1)"
        )));
    }
    let mut counts = vec![0; classes];
    let mut covered = vec![false; classes];
    for p in probs {
        if p.len() != classes {
            return Err(Error::Shape(format!(
                "probability row of {} for {classes} classes",
                p.len()
            )));
        }
        let k = argmax(p);
        counts[k] += 1;
        if p[k] >= threshold {
            covered[k] = true;
        }
    }
    let covered_modes: Vec<usize> = (0..classes).filter(|&k| covered[k]).collect();
    Ok(ModeReport {
        missing_count: classes - covered_modes.len(),
        covered_modes,
        per_mode_counts: counts,
    })
}

pub fn missing_modes(
    samples: &Tensor<f32>,
    oracle: &OracleClassifier<f32>,
    threshold: f64,
) -> Result<ModeReport> {
    missing_modes_from_probs(&oracle.predict_proba(samples)?, oracle.classes, threshold)
}

pub fn accuracy_from_predictions(
    pred: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<AccuracyReport> {
    if pred.len() != labels.len() {
        return Err(Error::CountMismatch {
            what: "predictions vs labels",
            left: pred.len(),
            right: labels.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut confusion = vec![vec![0; classes]; classes];
    for (&p, &y) in pred.iter().zip(labels) {
        if y >= classes || p >= classes {
            return Err(Error::LabelOutOfRange {
                label: y.max(p),
                classes,
            });
        }
        confusion[y][p] += 1;
    }
    let trace: usize = (0..classes).map(|k| confusion[k][k]).sum();
    Ok(AccuracyReport {
        top1: trace as f64 / pred.len() as f64,
        confusion,
    })
}

/// Oracle top-1 on translated source images against the source labels.
pub fn adaptation_accuracy(
    translated: &Tensor<f32>,
    labels: &[usize],
    oracle: &OracleClassifier<f32>,
) -> Result<AccuracyReport> {
    let n = translated.shape().first().copied().unwrap_or(0);
    if n != labels.len() {
        return Err(Error::CountMismatch {
            what: "translated samples vs labels",
            left: n,
            right: labels.len(),
        });
    }
    accuracy_from_predictions(&oracle.predict(translated)?, labels, oracle.classes)
}

/// Maps images to the plane.
pub trait Embedder {
    fn embed(&self, images: &Tensor<f32>) -> Result<Vec<(f64, f64)>>;
}

/// Brightness-weighted centroid `(x, y)` in pixel coordinates. For the ring
/// data this recovers the generating glyph position.
#[derive(Clone, Copy, Debug, Default)]
pub struct CentroidEmbedder;

impl Embedder for CentroidEmbedder {
    fn embed(&self, images: &Tensor<f32>) -> Result<Vec<(f64, f64)>> {
        let (n, c, h, w) = match *images.shape() {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "embedder expects (n, c, h, w), got {:?}",
                    images.shape()
                )))
            }
        };
        let per = c * h * w;
        Ok((0..n)
            .map(|s| {
                let img = &images.data()[s * per..(s + 1) * per];
                let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
                for (i, &v) in img.iter().enumerate() {
                    let wgt = (v as f64 + 1.0).max(0.0);
                    let p = i % (h * w);
                    sx += wgt * (p % w) as f64;
                    sy += wgt * (p / w) as f64;
                    sw += wgt;
                }
                if sw > 0.0 {
                    (sx / sw, sy / sw)
                } else {
                    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
                }
            })
            .collect())
    }
}

/// Oracle penultimate features projected onto their top two principal
/// directions, fitted on the reference set.
pub struct OracleEmbedder<'a> {
    oracle: &'a OracleClassifier<f32>,
    mean: Vec<f64>,
    axes: [Vec<f64>; 2],
}

impl<'a> OracleEmbedder<'a> {
    pub fn fit(oracle: &'a OracleClassifier<f32>, reference: &Tensor<f32>) -> Result<Self> {
        let feats = oracle.features(reference)?;
        if feats.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let d = feats[0].len();
        let n = feats.len() as f64;
        let mut mean = vec![0.0; d];
        for f in &feats {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let centered: Vec<Vec<f64>> = feats
            .iter()
            .map(|f| f.iter().zip(&mean).map(|(v, m)| v - m).collect())
            .collect();
        let cov_mul = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; d];
            for row in &centered {
                let dot: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
                for (o, r) in out.iter_mut().zip(row) {
                    *o += dot * r;
                }
            }
            out
        };
        let normalize = |v: &mut Vec<f64>| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
        };
        let mut axes: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
        for k in 0..2 {
            // deterministic start, then power iteration with deflation
            let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7 + k * 3) % 5) as f64).collect();
            normalize(&mut v);
            for _ in 0..100 {
                let mut nv = cov_mul(&v);
                for prev in &axes[..k] {
                    let dot: f64 = nv.iter().zip(prev).map(|(a, b)| a * b).sum();
                    nv.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
                }
                normalize(&mut nv);
                v = nv;
            }
            axes[k] = v;
        }
        Ok(Self { oracle, mean, axes })
    }
}

impl Embedder for OracleEmbedder<'_> {
    fn embed(&self, images: &Tensor<f32>) -> Result<Vec<(f64, f64)>> {
        Ok(self
            .oracle
            .features(images)?
            .iter()
            .map(|f| {
                let proj = |a: &[f64]| {
                    f.iter()
                        .zip(&self.mean)
                        .zip(a)
                        .map(|((v, m), w)| (v - m) * w)
                        .sum::<f64>()
                };
                (proj(&self.axes[0]), proj(&self.axes[1]))
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    Real,
    Generated,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScatterRow {
    pub x: f64,
    pub y: f64,
    pub mode: usize,
    pub source: PointSource,
}

/// Embeds `images` and pairs each point with the oracle's predicted mode.
pub fn scatter_rows(
    images: &Tensor<f32>,
    source: PointSource,
    embedder: &dyn Embedder,
    oracle: &OracleClassifier<f32>,
) -> Result<Vec<ScatterRow>> {
    if images.shape().first().copied().unwrap_or(0) == 0 {
        return Ok(Vec::new());
    }
    let pts = embedder.embed(images)?;
    let modes = oracle.predict(images)?;
    Ok(pts
        .into_iter()
        .zip(modes)
        .map(|((x, y), mode)| ScatterRow { x, y, mode, source })
        .collect())
}

/// CSV with header `x,y,mode,source`.
pub fn write_scatter<W: Write>(mut w: W, rows: &[ScatterRow]) -> Result<()> {
    writeln!(w, "x,y,mode,source")?;
    for r in rows {
        let src = match r.source {
            PointSource::Real => "real",
            PointSource::Generated => "generated",
        };
        writeln!(w, "{},{},{},{}", r.x, r.y, r.mode, src)?;
    }
    Ok(())
}

/// Writes reference (real) and generated points to `path`.
pub fn emit_scatter(
    reference: &Tensor<f32>,
    generated: &Tensor<f32>,
    embedder: &dyn Embedder,
    oracle: &OracleClassifier<f32>,
    path: &Path,
) -> Result<usize> {
    let mut rows = scatter_rows(reference, PointSource::Real, embedder, oracle)?;
    rows.extend(scatter_rows(
        generated,
        PointSource::Generated,
        embedder,
        oracle,
    )?);
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_scatter(&mut w, &rows)?;
    w.flush()?;
    Ok(rows.len())
}
