//! Parameter storage and the handful of layer types the networks are built
//! from. Layers hold indices into a [`Net`]'s parameter list; a forward pass
//! binds the whole list onto a tape once and indexes into the bound handles.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{BnMode, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each training-mode update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Named parameters plus batchnorm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Net<T> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Real> Default for Net<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Net<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            params: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.params.push(value);
        self.params.len() - 1
    }

    fn add_stats(&mut self, channels: usize) -> usize {
        self.stats.push(RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        self.stats.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect()
    }

    /// Gradients for bound parameters, zero where the loss did not reach.
    pub fn grads(&self, tape: &Tape<T>, bound: &[Var]) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(bound)
            .map(|(p, &v)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Net<U> {
        Net {
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|v| U::from_f64c(v.to_f64c())).collect(),
                    var: s.var.iter().map(|v| U::from_f64c(v.to_f64c())).collect(),
                })
                .collect(),
        }
    }

    /// Flattened `(name, tensor)` view including running statistics, used by
    /// checkpoints.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(n, p)| (format!("{prefix}{n}"), p.clone()))
            .collect();
        for (i, s) in self.stats.iter().enumerate() {
            let c = s.mean.len();
            out.push((
                format!("{prefix}bnstat{i}.mean"),
                Tensor::new([c], s.mean.clone()).expect("channel count"),
            ));
            out.push((
                format!("{prefix}bnstat{i}.var"),
                Tensor::new([c], s.var.clone()).expect("channel count"),
            ));
        }
        out
    }

    /// Inverse of [`Net::named_tensors`]; shapes must match exactly.
    pub fn load_named(
        &mut self,
        prefix: &str,
        lookup: &dyn Fn(&str) -> Option<Tensor<T>>,
    ) -> Result<()> {
        for (name, p) in self.names.iter().zip(self.params.iter_mut()) {
            let key = format!("{prefix}{name}");
            let t = lookup(&key)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing record {key}")))?;
            if t.shape() != p.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "record {key} has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            *p = t;
        }
        for (i, s) in self.stats.iter_mut().enumerate() {
            for (suffix, dst) in [("mean", &mut s.mean), ("var", &mut s.var)] {
                let key = format!("{prefix}bnstat{i}.{suffix}");
                let t = lookup(&key)
                    .ok_or_else(|| Error::ConfigMismatch(format!("missing record {key}")))?;
                if t.numel() != dst.len() {
                    return Err(Error::ConfigMismatch(format!(
                        "record {key} has wrong length"
                    )));
                }
                *dst = t.into_data();
            }
        }
        Ok(())
    }
}

/// Everything a layer needs during one forward pass.
pub struct Fwd<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub p: &'a [Var],
    pub stats: &'a mut [RunningStats<T>],
    pub mode: Mode,
}

fn normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64c(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// 3×3 convolution. Convolutions feeding a batchnorm carry no bias: the
/// batch mean would cancel it.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub w: usize,
    pub b: Option<usize>,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        net: &mut Net<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (c_in * 9) as f64).sqrt();
        let w = net.add_param(format!("{name}.w"), normal(rng, &[c_out, c_in, 3, 3], std));
        let b = Some(net.add_param(format!("{name}.b"), Tensor::zeros([c_out])));
        Self {
            w,
            b,
            stride,
            c_in,
            c_out,
        }
    }

    pub fn new_unbiased<T: Real, R: Rng>(
        net: &mut Net<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (c_in * 9) as f64).sqrt();
        let w = net.add_param(format!("{name}.w"), normal(rng, &[c_out, c_in, 3, 3], std));
        Self {
            w,
            b: None,
            stride,
            c_in,
            c_out,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let b = match self.b {
            Some(i) => f.p[i],
            None => f.tape.constant(Tensor::zeros([self.c_out])),
        };
        f.tape.conv2d(x, f.p[self.w], b, self.stride)
    }
}

/// `x·W + b` with `W` stored as (in, out).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        net: &mut Net<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        let w = net.add_param(format!("{name}.w"), normal(rng, &[d_in, d_out], std));
        let b = net.add_param(format!("{name}.b"), Tensor::zeros([d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let y = f.tape.matmul(x, f.p[self.w])?;
        f.tape.add_row_bias(y, f.p[self.b])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub slot: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(net: &mut Net<T>, name: &str, channels: usize) -> Self {
        let gamma = net.add_param(format!("{name}.gamma"), Tensor::ones([channels]));
        let beta = net.add_param(format!("{name}.beta"), Tensor::zeros([channels]));
        let slot = net.add_stats(channels);
        Self { gamma, beta, slot }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let eps = T::from_f64c(BN_EPS);
        let (g, b) = (f.p[self.gamma], f.p[self.beta]);
        match f.mode {
            Mode::Train => {
                let y = f.tape.batchnorm2d(x, g, b, BnMode::Train { eps })?;
                let (mean, var) = f.tape.batch_stats(y).expect("training-mode node");
                let keep = T::from_f64c(BN_MOMENTUM);
                let new = T::one() - keep;
                let rs = &mut f.stats[self.slot];
                for (r, &m) in rs.mean.iter_mut().zip(mean) {
                    *r = keep * *r + new * m;
                }
                for (r, &v) in rs.var.iter_mut().zip(var) {
                    *r = keep * *r + new * v;
                }
                Ok(y)
            }
            Mode::Eval => {
                let rs = &f.stats[self.slot];
                let mode = BnMode::Eval {
                    mean: rs.mean.clone(),
                    var: rs.var.clone(),
                    eps,
                };
                f.tape.batchnorm2d(x, g, b, mode)
            }
        }
    }
}
