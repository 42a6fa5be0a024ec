//! Finite-difference gradient checking.

use volterra_core::{Mode, Tensor};

use crate::error::{invalid, Error, Result};
use crate::layers::Model;

/// Largest `|analytic - numeric| / (1 + |numeric|)` over all coordinates,
/// where `f` returns the value and the analytic gradient at a point and
/// `numeric` is the central difference with `step`.
pub fn grad_check<F>(mut f: F, p: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0 && step.is_finite()) {
        return invalid(format!("finite-difference step must be positive, got {step}"));
    }
    let (value, analytic) = f(p)?;
    if analytic.len() != p.len() {
        return invalid(format!("gradient has {} entries for {} parameters", analytic.len(), p.len()));
    }
    finite("value", value)?;
    let mut q = p.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        q[i] = p[i] + step;
        let up = finite("value", f(&q)?.0)?;
        q[i] = p[i] - step;
        let down = finite("value", f(&q)?.0)?;
        q[i] = p[i];
        let numeric = (up - down) / (2.0 * step);
        let a = finite("analytic gradient", analytic[i])?;
        worst = worst.max((a - numeric).abs() / (1.0 + numeric.abs()));
    }
    Ok(worst)
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite {what}: {v}")))
    }
}

/// Checks the tape's parameter gradients of the mean cross-entropy of
/// `model` on one batch. Training mode uses batch statistics; running
/// statistics are left untouched.
pub fn model_grad_check(model: &Model, x: &Tensor, labels: &[usize], mode: Mode, step: f64) -> Result<f64> {
    let mut probe = model.clone();
    let p = probe.flat_params();
    grad_check(
        |q| {
            probe.set_flat_params(q)?;
            let (loss, grads, _) = probe.loss_and_grads(x, labels, mode)?;
            Ok((loss, grads.flat()))
        },
        &p,
        step,
    )
}
