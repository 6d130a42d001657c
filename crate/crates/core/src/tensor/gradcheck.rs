use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_gradient" });
        }
        *slot = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Outcome of comparing an analytic gradient to a numeric one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradComparison {
    /// Largest `|a - n| / max(|a|, |n|, floor)` over all coordinates.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

/// A coordinate passes when `|a - n| <= max(floor, rtol * max(|a|, |n|))`,
/// i.e. relative error with an absolute floor for near-zero entries.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], rtol: f64, floor: f64) -> GradComparison {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut max_rel_err: f64 = 0.0;
    let mut max_abs_err: f64 = 0.0;
    let mut passed = true;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        max_abs_err = max_abs_err.max(diff);
        max_rel_err = max_rel_err.max(diff / scale.max(floor));
        if diff > floor.max(rtol * scale) {
            passed = false;
        }
    }
    GradComparison {
        max_rel_err,
        max_abs_err,
        passed,
    }
}
