//! Small conv classifier trained in-repo on target-domain data; it labels
//! generated samples for the evaluation metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, Fwd, Linear, Mode, Net};
use super::{check_image, strided_extent, ImageShape};
use crate::diffcore::{kernels, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::trainer::adam::{AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleClassifier<T> {
    pub net: Net<T>,
    pub image: ImageShape,
    pub classes: usize,
    pub blocks: Vec<Conv>,
    pub fc: Linear,
}

/// Settings for [`OracleClassifier::fit`].
#[derive(Clone, Copy, Debug)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Rows `idx` of an (n, ...) batch tensor.
pub fn gather<T: Real>(batch: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let n = batch.shape()[0];
    let row = batch.numel() / n;
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        if i >= n {
            return Err(Error::Shape(format!(
                "row {i} out of range for batch of {n}"
            )));
        }
        data.extend_from_slice(&batch.data()[i * row..(i + 1) * row]);
    }
    let mut shape = batch.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

/// Row-wise softmax in f64.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(classes)
        .map(|row| {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

impl<T: Real> OracleClassifier<T> {
    pub fn new(image: ImageShape, channels: &[usize], classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Net::new();
        let mut c_in = image.channels;
        let blocks: Vec<Conv> = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(&mut net, &format!("oracle.conv{i}"), c_in, c, 2, &mut rng);
                c_in = c;
                conv
            })
            .collect();
        let h = strided_extent(image.height, channels.len());
        let w = strided_extent(image.width, channels.len());
        let fc = Linear::new(&mut net, "oracle.fc", c_in * h * w, classes, &mut rng);
        Self {
            net,
            image,
            classes,
            blocks,
            fc,
        }
    }

    /// Class logits, shape (n, classes).
    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let flat = self.penultimate(tape, p, x)?;
        let mut stats = Vec::new();
        let mut f = Fwd {
            tape,
            p,
            stats: &mut stats,
            mode: Mode::Eval,
        };
        self.fc.forward(&mut f, flat)
    }

    /// Flattened convolutional features feeding the last layer.
    pub fn penultimate(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        check_image(tape, x, &self.image, "oracle")?;
        let mut stats = Vec::new();
        let mut f = Fwd {
            tape,
            p,
            stats: &mut stats,
            mode: Mode::Eval,
        };
        let mut h = x;
        for conv in &self.blocks {
            h = conv.forward(&mut f, h)?;
            h = f.tape.relu(h)?;
        }
        f.tape.flatten(h)
    }

    /// Penultimate features of every image, one row each.
    pub fn features(&self, images: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        self.map_chunks(images, |tape, p, x| {
            let h = self.penultimate(tape, p, x)?;
            let d = tape.value(h).shape()[1];
            Ok(tape
                .value(h)
                .to_f64_vec()
                .chunks(d)
                .map(<[f64]>::to_vec)
                .collect())
        })
    }

    fn map_chunks<F>(&self, images: &Tensor<T>, f: F) -> Result<Vec<Vec<f64>>>
    where
        F: Fn(&mut Tape<T>, &[Var], Var) -> Result<Vec<Vec<f64>>> + Sync + Send,
    {
        let n = images.shape().first().copied().unwrap_or(0);
        const CHUNK: usize = 64;
        let chunks = n.div_ceil(CHUNK);
        let parts =
            kernels::map_indices(Default::default(), chunks, |c| -> Result<Vec<Vec<f64>>> {
                let idx: Vec<usize> = (c * CHUNK..((c + 1) * CHUNK).min(n)).collect();
                let batch = gather(images, &idx)?;
                let mut tape = Tape::with_exec(kernels::Exec::Sequential);
                let p = self.net.bind(&mut tape, false);
                let x = tape.constant(batch);
                f(&mut tape, &p, x)
            });
        let mut out = Vec::with_capacity(n);
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }

    /// Softmax class probabilities for every image of an (n, c, h, w) batch.
    pub fn predict_proba(&self, images: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        self.map_chunks(images, |tape, p, x| {
            let logits = self.forward(tape, p, x)?;
            Ok(softmax_rows(&tape.value(logits).to_f64_vec(), self.classes))
        })
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(self
            .predict_proba(images)?
            .iter()
            .map(|row| argmax(row))
            .collect())
    }

    /// Minibatch Adam on softmax cross-entropy.
    pub fn fit(&mut self, images: &Tensor<T>, labels: &[usize], cfg: &FitConfig) -> Result<f64> {
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::CountMismatch {
                what: "oracle images and labels",
                left: n,
                right: labels.len(),
            });
        }
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let adam = AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(self.net.params());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut last = f64::NAN;
        let bs = cfg.batch_size.clamp(1, n);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks_exact(bs) {
                let batch = gather(images, idx)?;
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let mut tape = Tape::new();
                let p = self.net.bind(&mut tape, true);
                let x = tape.constant(batch);
                let logits = self.forward(&mut tape, &p, x)?;
                let loss = tape.softmax_cross_entropy(logits, y)?;
                last = tape.value(loss).item().to_f64c();
                tape.backward(loss)?;
                let grads = self.net.grads(&tape, &p);
                state.update(&adam, self.net.params_mut(), &grads)?;
            }
        }
        Ok(last)
    }

    pub fn accuracy(&self, images: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(images)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}
