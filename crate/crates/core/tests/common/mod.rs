//! Shared test oracles.

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative tolerance for gradient agreement.
pub const REL_TOL: f64 = 1e-4;

/// Absolute slack covering finite-difference rounding noise on gradients
/// whose magnitude is near zero.
pub const ABS_SLACK: f64 = 1e-10;

/// Checks an analytic gradient against central finite differences of the
/// scalar function `f` at `x`.
pub fn assert_grad_matches(f: &dyn Fn(&[f64]) -> f64, grad: &[f64], x: &[f64], label: &str) {
    assert_eq!(grad.len(), x.len(), "{label}: gradient length");
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let plus = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let minus = f(&probe);
        probe[i] = x[i];
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let g = grad[i];
        let err = (g - fd).abs();
        let scale = g.abs().max(fd.abs());
        let ok = err <= REL_TOL * scale + ABS_SLACK;
        assert!(
            ok,
            "{label}: coordinate {i}: analytic {g:.10e} vs finite-difference {fd:.10e} \
             (rel err {:.3e})",
            err / scale.max(1e-300)
        );
    }
}
