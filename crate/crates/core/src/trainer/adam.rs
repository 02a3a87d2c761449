use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    /// Updates refused because a gradient was not finite.
    pub skipped: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            step: 0,
            skipped: 0,
        }
    }

    /// Applies one bias-corrected Adam update to every parameter of the group.
    /// If any gradient holds a NaN or infinity, nothing changes except the
    /// `skipped` counter, and `false` is returned.
    pub fn update(
        &mut self,
        cfg: &AdamConfig,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
    ) -> Result<bool> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::CountMismatch {
                what: "adam parameters and gradients",
                left: params.len(),
                right: grads.len(),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "adam: parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if grads.iter().any(|g| !g.all_finite()) {
            self.skipped += 1;
            log::warn!(
                "adam: non-finite gradient, update skipped ({} so far)",
                self.skipped
            );
            return Ok(false);
        }
        self.step += 1;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            adam_update(
                cfg,
                self.step,
                p.data_mut(),
                g.data(),
                m.data_mut(),
                v.data_mut(),
            );
        }
        Ok(true)
    }
}

/// `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`,
/// `p ← p − lr·m̂/(√v̂ + ε)` with `m̂ = m/(1−β1ᵗ)`, `v̂ = v/(1−β2ᵗ)`.
pub fn adam_update<T: Real>(
    cfg: &AdamConfig,
    step: u64,
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
) {
    let b1 = T::from_f64c(cfg.beta1);
    let b2 = T::from_f64c(cfg.beta2);
    let one = T::one();
    let c1 = T::from_f64c(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::from_f64c(1.0 - cfg.beta2.powi(step as i32));
    let lr = T::from_f64c(cfg.lr);
    let eps = T::from_f64c(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] = param[i] - lr * mh / (vh.sqrt() + eps);
    }
}
