//! Step counts and bounds from the convergence theory, evaluated on measured constants.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};

/// `T₀ = ⌈(1/2ηλ)(|ln(‖x(0)‖²/(ρπ²η))| + 3)⌉`, the GD+WD horizon.
pub fn t0(eta: f64, lambda: f64, x0_norm_sq: f64, rho: f64) -> usize {
    let inner = (x0_norm_sq / (rho * PI * PI * eta)).ln().abs() + 3.0;
    (inner / (2.0 * eta * lambda)).ceil() as usize
}

/// `8π⁴ρ²λη`: the guaranteed level of `min_t ‖∇L(x̄(t))‖²` within `T₀` GD+WD steps.
pub fn gd_grad_bound(rho: f64, lambda: f64, eta: f64) -> f64 {
    8.0 * PI.powi(4) * rho * rho * lambda * eta
}

/// Band checks start at `T1_MARGIN·T₁`: the theorem's constants are not tight.
pub const T1_MARGIN: f64 = 2.0;

/// `T₁ = (1/4ηλ)·max{ln(M²ηλ/σ̄²) + |ln(2e⁴M²η²/‖x(0)‖⁴)|, 8}`, after which the SGD+WD norm
/// stays in its band.
pub fn t1(eta: f64, lambda: f64, m_max: f64, sigma_hi_sq: f64, x0_norm_sq: f64) -> f64 {
    let el = eta * lambda;
    let a = (m_max * m_max * el / sigma_hi_sq).ln();
    let b = (2.0 * E.powi(4) * m_max * m_max * eta * eta / (x0_norm_sq * x0_norm_sq))
        .ln()
        .abs();
    (a + b).max(8.0) / (4.0 * el)
}

/// Both sides of `σ̲²/M² ≥ 3e^{4ηλ}√(λη ln(2T²/δ))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCondition {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn noise_condition(eta: f64, lambda: f64, sigma_lo_sq: f64, m_max: f64, steps: usize, delta: f64) -> NoiseCondition {
    let el = eta * lambda;
    let lhs = sigma_lo_sq / (m_max * m_max);
    let t = steps as f64;
    let rhs = 3.0 * (4.0 * el).exp() * (el * (2.0 * t * t / delta).ln()).sqrt();
    NoiseCondition {
        lhs,
        rhs,
        holds: lhs >= rhs,
    }
}

/// `T′ = (1/(α_C ηλ))·max{ln(R₀²/μ_max), ln(μ_min/R₀²)}` (clamped at 0) with
/// `R₀² = (2λ/η)‖x(0)‖⁴`, the clipped-SGD horizon up to an additive constant.
pub fn t_prime(eta: f64, lambda: f64, alpha_c: f64, x0_norm_sq: f64, mu_min: f64, mu_max: f64) -> f64 {
    let r0 = 2.0 * lambda / eta * x0_norm_sq * x0_norm_sq;
    let m = (r0 / mu_max).ln().max((mu_min / r0).ln()).max(0.0);
    m / (alpha_c * eta * lambda)
}

/// `(2λ/η)‖x‖⁴`, the quantity the SGD+WD band constrains.
pub fn band_quantity(eta: f64, lambda: f64, norm: f64) -> f64 {
    2.0 * lambda / eta * norm.powi(4)
}

/// Fraction of `norms` whose band quantity falls outside `[σ̲²/2, 4σ̄²]`.
pub fn band_violation_rate(norms: &[f64], eta: f64, lambda: f64, sigma_lo_sq: f64, sigma_hi_sq: f64) -> f64 {
    if norms.is_empty() {
        return 0.0;
    }
    let bad = norms
        .iter()
        .filter(|&&n| {
            let q = band_quantity(eta, lambda, n);
            !(q >= sigma_lo_sq / 2.0 && q <= 4.0 * sigma_hi_sq)
        })
        .count();
    bad as f64 / norms.len() as f64
}

/// Fixed point of `r ↦ (1−ηλ)²r + η²σ²/r` for `r = ‖x‖²`, i.e. `σ√(η/(λ(2−ηλ)))`:
/// the squared norm where decay balances a sphere-gradient of constant norm σ.
pub fn equilibrium_norm_sq(eta: f64, lambda: f64, sigma: f64) -> f64 {
    sigma * (eta / (lambda * (2.0 - eta * lambda))).sqrt()
}
