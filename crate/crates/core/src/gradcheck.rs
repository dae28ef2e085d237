//! Central-difference gradient checking.
//!
//! Every hand-written backward rule in the crate is verified against
//! [`grad_check`] in 64-bit precision.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing an analytic gradient to central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub const MIN_STEP: f64 = 1e-7;
pub const MAX_STEP: f64 = 1e-4;

/// Checks `analytic` against the central difference of `f` at `x` and returns
/// the full report.
pub fn grad_check_report<F>(mut f: F, x: &Tensor<f64>, analytic: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    if !(MIN_STEP..=MAX_STEP).contains(&h) {
        return Err(Error::invalid(
            "step size",
            format!("{h} outside [{MIN_STEP}, {MAX_STEP}]"),
        ));
    }
    x.expect_same_shape(analytic, "grad_check")?;
    let base = f(x);
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {base}")));
    }

    let mut probe = x.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("f(x ± h·e_{i}) = ({plus}, {minus})")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        if rel > report.max_rel_error || i == 0 {
            report = GradCheckReport {
                max_rel_error: rel.max(report.max_rel_error),
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

/// Maximum relative error between `analytic` and central differences of `f`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, analytic: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    grad_check_report(f, x, analytic, h).map(|r| r.max_rel_error)
}
