//! Finite-difference verification of analytic gradients.

use super::{no_grad, DiffArray};

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences with step `h`, component by component.
///
/// Returns `max_i |analytic_i - fd_i| / max(1, |analytic_i|)`; NaN if the
/// function produced a non-finite value anywhere along the way. `x` is
/// perturbed in place and restored.
pub fn grad_check<F>(f: F, x: &DiffArray, h: f64) -> f64
where
    F: Fn(&DiffArray) -> DiffArray,
{
    assert!(h > 0.0, "grad_check: step must be positive, got {h}");
    x.zero_grad();
    let y = f(x);
    assert_eq!(y.numel(), 1, "grad_check: f must produce a scalar");
    y.backward();
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut max_err = 0.0f64;
    let mut saw_nan = !y.item().is_finite();
    for i in 0..x.numel() {
        let orig = x.value_at(i);
        x.set_value(i, orig + h);
        let plus = no_grad(|| f(x).item());
        x.set_value(i, orig - h);
        let minus = no_grad(|| f(x).item());
        x.set_value(i, orig);
        let fd = (plus - minus) / (2.0 * h);
        if !fd.is_finite() {
            saw_nan = true;
            continue;
        }
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    if saw_nan {
        f64::NAN
    } else {
        max_err
    }
}
