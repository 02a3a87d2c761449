//! Consistency, symmetry and the two adversarial terms, plus their weighted
//! combination.

use serde::{Deserialize, Serialize};

use crate::attention::InstanceFeatures;
use crate::diffcore::{Real, Tape, Var};
use crate::error::{Error, Result};

/// Distance between paired instance features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Mean squared difference over all feature elements.
    #[default]
    L2,
    /// Mean squared difference of globally pooled channel vectors, i.e. the
    /// features the auxiliary classifier head sees.
    ClassifierFeature,
}

impl DistanceMetric {
    pub fn distance<T: Real>(self, tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
        match self {
            DistanceMetric::L2 => tape.l2_distance(a, b),
            DistanceMetric::ClassifierFeature => {
                let pa = tape.global_avg_pool(a)?;
                let pb = tape.global_avg_pool(b)?;
                tape.l2_distance(pa, pb)
            }
        }
    }
}

/// Mean over instances of `d(a_i, b_i)`; each `d` already averages over the
/// batch. Shared by consistency and symmetry.
fn paired_distance<T: Real>(
    tape: &mut Tape<T>,
    a: &InstanceFeatures,
    b: &InstanceFeatures,
    d: DistanceMetric,
) -> Result<Var> {
    if a.len() != b.len() {
        return Err(Error::InstanceCount {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::InstanceCount { left: 0, right: 0 });
    }
    let mut total: Option<Var> = None;
    for (&x, &y) in a.instances.iter().zip(&b.instances) {
        let di = d.distance(tape, x, y)?;
        total = Some(match total {
            None => di,
            Some(acc) => tape.add(acc, di)?,
        });
    }
    let total = total.expect("non-empty");
    tape.scale(total, T::from_f64c(1.0 / a.len() as f64))
}

/// `d(DAE(s), DAE(F(s)))`.
pub fn consistency_loss<T: Real>(
    tape: &mut Tape<T>,
    src_inst: &InstanceFeatures,
    translated_inst: &InstanceFeatures,
    d: DistanceMetric,
) -> Result<Var> {
    paired_distance(tape, src_inst, translated_inst, d)
}

/// `d(DAE(t), DAE(F(t)))`.
pub fn symmetry_loss<T: Real>(
    tape: &mut Tape<T>,
    tgt_inst: &InstanceFeatures,
    reconstructed_inst: &InstanceFeatures,
    d: DistanceMetric,
) -> Result<Var> {
    paired_distance(tape, tgt_inst, reconstructed_inst, d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Discriminator,
    Generator,
}

fn adversarial<T: Real>(tape: &mut Tape<T>, real: Var, fake: Var, side: Side) -> Result<Var> {
    let n_fake = tape.value(fake).numel();
    match side {
        Side::Discriminator => {
            let n_real = tape.value(real).numel();
            let r = tape.bce_with_logits(real, vec![T::one(); n_real])?;
            let f = tape.bce_with_logits(fake, vec![T::zero(); n_fake])?;
            tape.add(r, f)
        }
        // non-saturating: push D(fake) towards 1
        Side::Generator => tape.bce_with_logits(fake, vec![T::one(); n_fake]),
    }
}

/// `D1` term: `t` real, `F(s)` fake.
pub fn adv_source<T: Real>(
    tape: &mut Tape<T>,
    real_t_logits: Var,
    fake_s_logits: Var,
    side: Side,
) -> Result<Var> {
    adversarial(tape, real_t_logits, fake_s_logits, side)
}

/// `D2` term: `t` real, `F(t)` fake.
pub fn adv_target<T: Real>(
    tape: &mut Tape<T>,
    real_t_logits: Var,
    recon_t_logits: Var,
    side: Side,
) -> Result<Var> {
    adversarial(tape, real_t_logits, recon_t_logits, side)
}

/// Weights of the full objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
        }
    }
}

/// Loss components as tape nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub adv_s: Var,
    pub adv_t: Var,
    pub cst: Var,
    pub sym: Var,
    pub geo: Var,
}

/// Reported loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub adv_s: f64,
    pub adv_t: f64,
    pub cst: f64,
    pub sym: f64,
    pub geo: f64,
    pub total: f64,
}

impl LossBundle {
    /// Builds a bundle whose `total` is the weighted sum of the components.
    pub fn new(adv_s: f64, adv_t: f64, cst: f64, sym: f64, geo: f64, w: &LossWeights) -> Self {
        Self {
            adv_s,
            adv_t,
            cst,
            sym,
            geo,
            total: weighted_sum(adv_s, adv_t, cst, sym, geo, w),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.adv_s, self.adv_t, self.cst, self.sym, self.geo, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn weighted_sum(adv_s: f64, adv_t: f64, cst: f64, sym: f64, geo: f64, w: &LossWeights) -> f64 {
    adv_s + adv_t + w.alpha * cst + w.beta * sym + w.gamma * geo
}

/// `adv_s + adv_t + α·cst + β·sym + γ·geo` on the tape.
pub fn full_objective<T: Real>(
    tape: &mut Tape<T>,
    terms: &LossTerms,
    w: &LossWeights,
) -> Result<Var> {
    for (name, v) in [
        ("adv_s", terms.adv_s),
        ("adv_t", terms.adv_t),
        ("cst", terms.cst),
        ("sym", terms.sym),
        ("geo", terms.geo),
    ] {
        if !tape.value(v).all_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let adv = tape.add(terms.adv_s, terms.adv_t)?;
    let mut total = adv;
    for (v, c) in [
        (terms.cst, w.alpha),
        (terms.sym, w.beta),
        (terms.geo, w.gamma),
    ] {
        let s = tape.scale(v, T::from_f64c(c))?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}
