//! Central-difference gradient oracle.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative error used by every gradient comparison in the crate:
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference gradient of a scalar function of `x`.
pub fn numerical_gradient(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Vec<f64>> {
    let base = f(x)?;
    if !base.is_finite() {
        return Err(Error::Oracle(format!("f(x) is not finite ({base})")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!("non-finite f near element {i}")));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Compares a supplied analytic gradient against central differences and
/// returns the maximum relative error over elements.
pub fn compare_gradient(
    analytic: &[f64],
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    if analytic.len() != x.numel() {
        return Err(Error::Oracle(format!(
            "analytic gradient has {} entries for {} inputs",
            analytic.len(),
            x.numel()
        )));
    }
    let numeric = numerical_gradient(f, x, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Checks the tape gradient of `f` at `x` against central differences.
///
/// `f` records a scalar-valued computation on a fresh tape given the input
/// variable; it is invoked once for the analytic pass and twice per element.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let value = tape.value(out).item();
    if !value.is_finite() {
        return Err(Error::Oracle(format!("f(x) is not finite ({value})")));
    }
    let analytic = tape.backward(out)?.wrt(xv);
    let mut eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(p.clone());
        let o = f(&mut t, v)?;
        Ok(t.value(o).item())
    };
    compare_gradient(analytic.data(), &mut eval, x, eps)
}
