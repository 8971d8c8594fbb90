//! Central finite differences, used as the independent oracle for every analytic gradient.

use crate::error::Result;
use crate::vecmath;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe)?;
        probe[i] = orig - h;
        let fm = f(&probe)?;
        probe[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Finite-difference Hessian-vector product `(∇f(x+hv) − ∇f(x−hv)) / 2h`.
pub fn hvp(grad: impl Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], v: &[f64], h: f64) -> Result<Vec<f64>> {
    let gp = grad(&vecmath::axpy(x, h, v))?;
    let gm = grad(&vecmath::axpy(x, -h, v))?;
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect())
}

/// Symmetric relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let d = vecmath::norm(&vecmath::sub(a, b));
    d / vecmath::norm(a).max(vecmath::norm(b)).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_gradient() {
        let f = |x: &[f64]| Ok(x[0].powi(3) + 2.0 * x[0] * x[1]);
        let g = numeric_grad(f, &[1.5, -0.5], 1e-6).unwrap();
        assert!((g[0] - (3.0 * 2.25 - 1.0)).abs() < 1e-7);
        assert!((g[1] - 3.0).abs() < 1e-7);
    }

    #[test]
    fn hvp_of_quadratic_is_exact() {
        // f = x0² + 3 x0 x1 → H = [[2,3],[3,0]]
        let grad = |x: &[f64]| Ok(vec![2.0 * x[0] + 3.0 * x[1], 3.0 * x[0]]);
        let hv = hvp(grad, &[0.3, 0.7], &[1.0, 2.0], 1e-5).unwrap();
        assert!((hv[0] - 8.0).abs() < 1e-9 && (hv[1] - 3.0).abs() < 1e-9);
    }
}
