//! Central-difference gradient verification in 64-bit mode.

use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct ParamReport {
    pub index: usize,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, params: &[Tensor<f64>], trainable: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone(), trainable))
        .collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::NonScalarLoss(tape.value(out).shape().to_vec()));
    }
    Ok((tape, vars, out))
}

/// Compares the tape's analytic gradients of scalar `f` against central
/// differences `(f(p+ε) − f(p−ε)) / 2ε`, element by element.
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor<f64>],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&epsilon) {
        return Err(Error::Config(format!(
            "finite-difference epsilon {epsilon} outside [1e-5, 1e-2]"
        )));
    }
    let (mut tape, vars, out) = eval(&f, params, true)?;
    let base = tape.value(out).item();
    let (_, _, again) = eval(&f, params, false).map(|(t, v, o)| {
        let val = t.value(o).item();
        (t, v, val)
    })?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }
    tape.backward(out)?;

    let mut reports = Vec::with_capacity(params.len());
    for (pi, (p, &v)) in params.iter().zip(&vars).enumerate() {
        let analytic = tape
            .grad(v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; p.numel()]);
        let mut work: Vec<Tensor<f64>> = params.to_vec();
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = p.data()[j];
            work[pi].data_mut()[j] = orig + epsilon;
            let (t_plus, _, o_plus) = eval(&f, &work, false)?;
            work[pi].data_mut()[j] = orig - epsilon;
            let (t_minus, _, o_minus) = eval(&f, &work, false)?;
            work[pi].data_mut()[j] = orig;
            let numeric =
                (t_plus.value(o_plus).item() - t_minus.value(o_minus).item()) / (2.0 * epsilon);
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        reports.push(ParamReport {
            index: pi,
            numel: p.numel(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradReport {
        params: reports,
        tolerance,
    })
}
