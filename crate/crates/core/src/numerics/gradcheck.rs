use crate::error::{Error, Result};

/// Compares an analytic gradient against central differences.
///
/// `value_and_grad` returns `(f(x), ∇f(x))`. The result is the maximum over
/// coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(value_and_grad: F, x: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step size {h} must be positive")));
    }
    let (f0, grad) = value_and_grad(x);
    if !f0.is_finite() {
        return Err(Error::Numeric("function value at x is not finite".into()));
    }
    if grad.len() != x.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries for a {}-dim point",
            grad.len(),
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = value_and_grad(&probe).0;
        probe[i] = x[i] - h;
        let fm = value_and_grad(&probe).0;
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("non-finite value probing coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = (grad[i] - numeric).abs() / grad[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
