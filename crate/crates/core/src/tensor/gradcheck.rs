//! Central finite-difference gradient checking.

/// Perturbation used by the verification suites.
pub const FD_EPS: f64 = 1e-5;

/// Denominator floor of [`max_relative_error`]; entries whose analytic and
/// numeric values are both below it are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

/// Central differences of `loss` with respect to every element of `x`.
/// `x` is perturbed in place and restored bit-exactly.
pub fn numeric_gradient(x: &mut [f64], eps: f64, mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = loss(x);
        x[i] = orig - eps;
        let down = loss(x);
        x[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    out
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, REL_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Weighted sum `Σ y_i r_i`, the scalar probe used to reduce an operator's
/// output to a loss whose gradient with respect to `y` is `r`.
pub fn probe(y: &[f64], r: &[f64]) -> f64 {
    y.iter().zip(r).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_polynomial_gradient() {
        let mut x = vec![0.5, -1.5, 2.0];
        let num = numeric_gradient(&mut x, FD_EPS, |v| v[0] * v[0] + v[1] * v[2] + v[2].powi(3));
        let ana = [1.0, 2.0, -1.5 + 12.0];
        assert!(max_relative_error(&ana, &num) < 1e-8);
        assert_eq!(x, vec![0.5, -1.5, 2.0]);
    }
}
