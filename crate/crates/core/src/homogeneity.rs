//! Numerical checks for homogeneity, Euler's identity, gradient degrees, equivalent
//! rescalings, and smoothness estimates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::hvp;
use crate::losses::{gaussian_vec, Evaluation, Scaled, StochasticLoss};
use crate::optim::{groups_from_flat, OptimizerConfig, ParamGroup, Trainer};
use crate::vecmath::{dot, norm, normalized, scaled, sub};

const ABS_FLOOR: f64 = 1e-30;

/// Worst-case residuals of one homogeneity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityReport {
    pub degree: f64,
    pub scales: Vec<f64>,
    /// `max |f(cx) − cᵏf(x)| / (|cᵏf(x)| + cᵏ‖∇f(x)‖‖x‖ + ε)`
    pub scaling_residual: Option<f64>,
    /// `max |⟨∇f(x),x⟩ − k f(x)| / (|k f(x)| + ‖∇f(x)‖‖x‖ + ε)`
    pub euler_residual: Option<f64>,
    /// `max ‖∇f(cx) − c^{k−1}∇f(x)‖ / (c^{k−1}‖∇f(x)‖ + ε)`
    pub gradient_degree_residual: Option<f64>,
    /// Indices of samples where `f` raised a domain error.
    pub inconclusive: Vec<usize>,
    pub tol: f64,
    pub passed: bool,
}

impl HomogeneityReport {
    fn new(degree: f64, scales: &[f64], tol: f64) -> Self {
        HomogeneityReport {
            degree,
            scales: scales.to_vec(),
            scaling_residual: None,
            euler_residual: None,
            gradient_degree_residual: None,
            inconclusive: Vec::new(),
            tol,
            passed: false,
        }
    }

    pub fn worst(&self) -> f64 {
        [self.scaling_residual, self.euler_residual, self.gradient_degree_residual]
            .into_iter()
            .flatten()
            .fold(0.0, f64::max)
    }

    fn finish(mut self, n_samples: usize) -> Self {
        let conclusive = self.inconclusive.len() < n_samples;
        let w = self.worst();
        self.passed = conclusive && w.is_finite() && w <= self.tol;
        self
    }
}

fn max_opt(a: Option<f64>, b: f64) -> Option<f64> {
    // NaN residuals must fail, so they win the max
    Some(match a {
        None => b,
        Some(a) if a.is_nan() || b.is_nan() => f64::NAN,
        Some(a) => a.max(b),
    })
}

fn check_scales(scales: &[f64]) -> Result<()> {
    if scales.is_empty() || scales.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
        return Err(Error::contract("homogeneity", "scales must be positive and finite"));
    }
    Ok(())
}

/// `f(cx) = cᵏf(x)` and Euler's identity `⟨∇f(x), x⟩ = k f(x)` at every sample.
pub fn check_homogeneity(
    f: &dyn Fn(&[f64]) -> Result<Evaluation>,
    samples: &[Vec<f64>],
    k: f64,
    scales: &[f64],
    tol: f64,
) -> Result<HomogeneityReport> {
    check_scales(scales)?;
    let mut rep = HomogeneityReport::new(k, scales, tol);
    'samples: for (i, x) in samples.iter().enumerate() {
        let base = match f(x) {
            Ok(e) => e,
            Err(Error::Domain { .. }) => {
                rep.inconclusive.push(i);
                continue;
            }
            Err(e) => return Err(e),
        };
        let gx = norm(&base.grad) * norm(x);
        let euler = (dot(&base.grad, x) - k * base.loss).abs() / ((k * base.loss).abs() + gx + ABS_FLOOR);
        let mut scaling: f64 = 0.0;
        for &c in scales {
            let ck = c.powf(k);
            let fc = match f(&scaled(x, c)) {
                Ok(e) => e.loss,
                Err(Error::Domain { .. }) => {
                    rep.inconclusive.push(i);
                    continue 'samples;
                }
                Err(e) => return Err(e),
            };
            let r = (fc - ck * base.loss).abs() / ((ck * base.loss).abs() + ck * gx + ABS_FLOOR);
            scaling = if r.is_nan() { f64::NAN } else { scaling.max(r) };
        }
        rep.euler_residual = max_opt(rep.euler_residual, euler);
        rep.scaling_residual = max_opt(rep.scaling_residual, scaling);
    }
    Ok(rep.finish(samples.len()))
}

/// `∇f(cx) = c^{k−1}∇f(x)`, i.e. the gradient is `(k−1)`-homogeneous.
pub fn check_gradient_degree(
    f: &dyn Fn(&[f64]) -> Result<Evaluation>,
    samples: &[Vec<f64>],
    k: f64,
    scales: &[f64],
    tol: f64,
) -> Result<HomogeneityReport> {
    check_scales(scales)?;
    let mut rep = HomogeneityReport::new(k, scales, tol);
    for (i, x) in samples.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let outcome: Result<()> = (|| {
            let g = f(x)?.grad;
            for &c in scales {
                let ck1 = c.powf(k - 1.0);
                let gc = f(&scaled(x, c))?.grad;
                let expect = scaled(&g, ck1);
                let r = norm(&sub(&gc, &expect)) / (norm(&expect) + ABS_FLOOR);
                worst = if r.is_nan() { f64::NAN } else { worst.max(r) };
            }
            Ok(())
        })();
        match outcome {
            Ok(()) => rep.gradient_degree_residual = max_opt(rep.gradient_degree_residual, worst),
            Err(Error::Domain { .. }) => rep.inconclusive.push(i),
            Err(e) => return Err(e),
        }
    }
    Ok(rep.finish(samples.len()))
}

/// Vector-valued version: `F(cx) = cᵏF(x)` and the directional Euler identity
/// `d/ds F(sx)|_{s=1} = k F(x)`, the derivative taken by central differences.
pub fn check_map_homogeneity(
    f: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    samples: &[Vec<f64>],
    k: f64,
    scales: &[f64],
    tol: f64,
) -> Result<HomogeneityReport> {
    check_scales(scales)?;
    const H: f64 = 1e-5;
    let mut rep = HomogeneityReport::new(k, scales, tol);
    for (i, x) in samples.iter().enumerate() {
        let mut scaling: f64 = 0.0;
        let mut euler = 0.0;
        let outcome: Result<()> = (|| {
            let fx = f(x)?;
            let nf = norm(&fx);
            for &c in scales {
                let ck = c.powf(k);
                let fc = f(&scaled(x, c))?;
                let r = norm(&sub(&fc, &scaled(&fx, ck))) / (ck * nf + ABS_FLOOR);
                scaling = if r.is_nan() { f64::NAN } else { scaling.max(r) };
            }
            let fp = f(&scaled(x, 1.0 + H))?;
            let fm = f(&scaled(x, 1.0 - H))?;
            let d: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * H)).collect();
            euler = norm(&sub(&d, &scaled(&fx, k))) / (nf + ABS_FLOOR);
            Ok(())
        })();
        match outcome {
            Ok(()) => {
                rep.scaling_residual = max_opt(rep.scaling_residual, scaling);
                rep.euler_residual = max_opt(rep.euler_residual, euler);
            }
            Err(Error::Domain { .. }) => rep.inconclusive.push(i),
            Err(e) => return Err(e),
        }
    }
    Ok(rep.finish(samples.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalingMode {
    /// `(cL, η/c, cλ)` against `(L, η, λ)`: identical iterates.
    LossRescale,
    /// `(L, c²η, λ/c², c·x(0))` against `(L, η, λ, x(0))`: identical directions.
    InitRescale,
}

/// Outcome of two paired runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingDeviation {
    /// Per-step deviation, index `t` compares the iterates after `t` updates (`t = 0` is the start).
    pub per_step: Vec<f64>,
    pub max: f64,
    /// Set when either run failed; `per_step` stops there.
    pub truncated_at: Option<usize>,
}

/// Runs the paired trajectories of an equivalent rescaling with a shared seed and
/// reports `‖x_a − x_b‖/‖x_a‖` (loss rescale) or `‖x̄_a − x̄_b‖` (init rescale) per step.
pub fn check_equivalent_scaling(
    loss: &dyn StochasticLoss,
    cfg: &OptimizerConfig,
    x0: &[f64],
    c: f64,
    steps: usize,
    mode: ScalingMode,
    seed: u64,
) -> Result<ScalingDeviation> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::contract("check_equivalent_scaling", "c must be positive"));
    }
    if mode == ScalingMode::InitRescale && !loss.is_scale_invariant() {
        return Err(Error::contract("check_equivalent_scaling", "init rescaling needs a scale-invariant loss"));
    }
    let groups_a = groups_from_flat(loss, x0)?;
    let (loss_b, cfg_b, groups_b): (Box<dyn StochasticLoss>, OptimizerConfig, Vec<ParamGroup>) = match mode {
        ScalingMode::LossRescale => (
            Box::new(Scaled::new(loss.clone_box(), c)),
            OptimizerConfig {
                eta: cfg.eta / c,
                lambda: cfg.lambda * c,
                plain_eta: cfg.plain_eta.map(|p| p / c),
                ..cfg.clone()
            },
            groups_a.clone(),
        ),
        ScalingMode::InitRescale => (
            loss.clone_box(),
            OptimizerConfig {
                eta: cfg.eta * c * c,
                lambda: cfg.lambda / (c * c),
                ..cfg.clone()
            },
            groups_a.iter().map(|g| g.scaled(c)).collect(),
        ),
    };
    let mut a = Trainer::new(loss, groups_a, cfg.clone(), seed)?;
    let mut b = Trainer::new(loss_b.as_ref(), groups_b, cfg_b, seed)?;
    let deviation = |a: &Trainer, b: &Trainer| -> f64 {
        let (xa, xb) = (a.flat(), b.flat());
        match mode {
            ScalingMode::LossRescale => norm(&sub(&xa, &xb)) / norm(&xa),
            ScalingMode::InitRescale => {
                // direction per group, since each group is invariant on its own
                let mut sq = 0.0;
                for (ga, gb) in a.groups().iter().zip(b.groups()) {
                    let (ua, ub) = (normalized(&ga.flat()), normalized(&gb.flat()));
                    match (ua, ub) {
                        (Some(ua), Some(ub)) => sq += norm(&sub(&ua, &ub)).powi(2),
                        _ => return f64::NAN,
                    }
                }
                sq.sqrt()
            }
        }
    };
    let mut per_step = vec![deviation(&a, &b)];
    let mut truncated_at = None;
    for t in 0..steps {
        if a.step().is_err() || b.step().is_err() {
            truncated_at = Some(t);
            break;
        }
        let d = deviation(&a, &b);
        if !d.is_finite() {
            truncated_at = Some(t);
            break;
        }
        per_step.push(d);
    }
    let max = per_step.iter().cloned().fold(0.0, f64::max);
    Ok(ScalingDeviation {
        per_step,
        max,
        truncated_at,
    })
}

/// Smoothness estimate `ρ ≈ max_{‖x‖=r} ‖∇²L(x)‖`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoEstimate {
    /// Largest spectral-norm estimate over samples, widened by 10%.
    pub rho: f64,
    pub raw_max: f64,
    /// False when some power iteration hit the iteration cap before settling.
    pub converged: bool,
}

pub const RHO_WIDENING: f64 = 1.1;
const HVP_STEP: f64 = 1e-5;

/// Power iteration on finite-difference Hessian-vector products of the mean loss at
/// random points of the unit sphere.
pub fn estimate_rho(loss: &dyn StochasticLoss, n_samples: usize, power_iters: usize, seed: u64) -> Result<RhoEstimate> {
    estimate_rho_at_radius(loss, 1.0, n_samples, power_iters, seed)
}

/// As [`estimate_rho`], with sample points on the sphere of the given radius.
pub fn estimate_rho_at_radius(
    loss: &dyn StochasticLoss,
    radius: f64,
    n_samples: usize,
    power_iters: usize,
    seed: u64,
) -> Result<RhoEstimate> {
    if n_samples == 0 || power_iters == 0 {
        return Err(Error::contract("estimate_rho", "need at least one sample and one iteration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grad = |x: &[f64]| loss.mean_eval(x).map(|e| e.grad);
    let mut raw_max: f64 = 0.0;
    let mut converged = true;
    for _ in 0..n_samples {
        let p = loss.random_unit_point(&mut rng);
        let x = scaled(&p, radius / norm(&p));
        let mut v = normalized(&gaussian_vec(&mut rng, x.len())).expect("nonzero gaussian");
        let mut est = 0.0;
        let mut settled = false;
        for _ in 0..power_iters {
            let hv = hvp(grad, &x, &v, HVP_STEP * radius)?;
            let n = norm(&hv);
            if n == 0.0 {
                est = 0.0;
                settled = true;
                break;
            }
            let prev = est;
            est = n;
            v = scaled(&hv, 1.0 / n);
            if (est - prev).abs() <= 1e-6 * est {
                settled = true;
                break;
            }
        }
        converged &= settled;
        raw_max = raw_max.max(est);
    }
    Ok(RhoEstimate {
        rho: raw_max * RHO_WIDENING,
        raw_max,
        converged,
    })
}

/// Sampled check of `‖∇L(x̄)‖ ≤ πρ` and `max L − min L ≤ (π²/2)ρ` on the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBoundsReport {
    pub max_grad_norm: f64,
    pub grad_bound: f64,
    pub loss_range: f64,
    pub range_bound: f64,
    /// Point attaining the largest gradient norm when that bound fails.
    pub witness: Option<Vec<f64>>,
    pub passed: bool,
}

pub fn check_gradient_bounds(
    loss: &dyn StochasticLoss,
    rho: f64,
    n_samples: usize,
    tol: f64,
    seed: u64,
) -> Result<GradientBoundsReport> {
    if n_samples == 0 {
        return Err(Error::contract("check_gradient_bounds", "need at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut gmax, mut lo, mut hi) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    let mut argmax = Vec::new();
    for _ in 0..n_samples {
        let p = loss.random_unit_point(&mut rng);
        let x = scaled(&p, 1.0 / norm(&p));
        let e = loss.mean_eval(&x)?;
        let g = norm(&e.grad);
        if g > gmax {
            gmax = g;
            argmax = x;
        }
        lo = lo.min(e.loss);
        hi = hi.max(e.loss);
    }
    let grad_bound = std::f64::consts::PI * rho;
    let range_bound = std::f64::consts::PI.powi(2) / 2.0 * rho;
    let grad_ok = gmax <= grad_bound * (1.0 + tol);
    let range_ok = hi - lo <= range_bound * (1.0 + tol);
    Ok(GradientBoundsReport {
        max_grad_norm: gmax,
        grad_bound,
        loss_range: hi - lo,
        range_bound,
        witness: (!grad_ok).then_some(argmax),
        passed: grad_ok && range_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{rayleigh_loss, Rayleigh};
    use crate::tensor::Tensor;
    use crate::vecmath::norm_sq;

    fn samples(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| gaussian_vec(&mut rng, d)).collect()
    }

    #[test]
    fn squared_norm_is_two_homogeneous() {
        let f = |x: &[f64]| {
            Ok(Evaluation {
                loss: norm_sq(x),
                grad: scaled(x, 2.0),
            })
        };
        let rep = check_homogeneity(&f, &samples(1, 10, 4), 2.0, &[1e-3, 1e3], 1e-14).unwrap();
        assert!(rep.passed, "{rep:?}");
        let rep = check_gradient_degree(&f, &samples(1, 10, 4), 2.0, &[10.0], 1e-14).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn rayleigh_is_zero_homogeneous_with_degree_minus_one_gradient() {
        let a = Tensor::diag(&[1.0, -2.0, 0.5]);
        let f = |x: &[f64]| rayleigh_loss(&a, x);
        let rep = check_homogeneity(&f, &samples(2, 10, 3), 0.0, &[1e-3, 1e3], 1e-10).unwrap();
        assert!(rep.passed, "{rep:?}");
        let rep = check_gradient_degree(&f, &samples(2, 10, 3), 0.0, &[10.0], 1e-10).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn unit_scale_has_zero_scaling_residual() {
        let a = Tensor::diag(&[3.0, 1.0]);
        let f = |x: &[f64]| rayleigh_loss(&a, x);
        let rep = check_homogeneity(&f, &samples(3, 5, 2), 0.0, &[1.0], 0.0).unwrap();
        assert_eq!(rep.scaling_residual, Some(0.0));
    }

    #[test]
    fn linear_function_has_constant_gradient() {
        let w = [1.0, -2.0, 0.5];
        let f = |x: &[f64]| {
            Ok(Evaluation {
                loss: dot(&w, x),
                grad: w.to_vec(),
            })
        };
        let rep = check_gradient_degree(&f, &samples(4, 5, 3), 1.0, &[1e-2, 1e2], 0.0).unwrap();
        assert!(rep.passed);
    }

    #[test]
    fn domain_errors_are_inconclusive() {
        let a = Tensor::identity(2);
        let f = |x: &[f64]| rayleigh_loss(&a, x);
        let pts = vec![vec![0.0, 0.0], vec![1.0, 2.0]];
        let rep = check_homogeneity(&f, &pts, 0.0, &[2.0], 1e-12).unwrap();
        assert_eq!(rep.inconclusive, vec![0]);
        assert!(rep.passed);
    }

    #[test]
    fn identity_rayleigh_has_zero_rho() {
        let loss = Rayleigh::new(Tensor::identity(3)).unwrap();
        let r = estimate_rho(&loss, 5, 20, 0).unwrap();
        assert_eq!(r.rho, 0.0);
        let b = check_gradient_bounds(&loss, r.rho, 20, 0.0, 0).unwrap();
        assert!(b.passed && b.max_grad_norm == 0.0);
    }

    #[test]
    fn rho_estimate_is_deterministic() {
        let loss = Rayleigh::new(Tensor::diag(&[1.0, 0.0, -0.5])).unwrap();
        assert_eq!(estimate_rho(&loss, 4, 30, 9).unwrap(), estimate_rho(&loss, 4, 30, 9).unwrap());
    }
}
