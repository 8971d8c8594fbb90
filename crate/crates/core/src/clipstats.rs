//! Clipped means of discrete distributions of squared gradient norms.
//!
//! For a distribution `P` on `[0, ∞)` and a clipping factor `C > 1`:
//! `F(μ) = E[min{t, Cμ}]`, `G(μ) = F(μ) − μ`, `μ_{P,C}` is the largest root of `G`, and
//! `M_{P,1/C} = sup{M ≥ 0 : P[t ≥ M] ≥ 1/C}`. `G` is concave, maximal at `M_{P,1/C}/C`,
//! and its root set is decided by the mass at zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::StochasticLoss;
use crate::vecmath::norm_sq;

const MERGE_TOL: f64 = 1e-12;
const WEIGHT_TOL: f64 = 1e-12;

/// Finite distribution with strictly increasing nonnegative atoms and weights summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDist {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalDist {
    /// Sorts atoms and merges those within `1e-12` of each other. Weights must sum to 1.
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Input(format!("weights sum to {total}, not 1")));
        }
        Self::build(atoms, weights)
    }

    /// As [`EmpiricalDist::new`] but rescales positive weights to sum to 1.
    pub fn normalized(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Input(format!("weights must have a positive finite sum, got {total}")));
        }
        Self::build(atoms, weights.iter().map(|w| w / total).collect())
    }

    /// Uniform weights over the given samples.
    pub fn from_samples(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("no samples".into()));
        }
        let w = 1.0 / values.len() as f64;
        Self::build(values.to_vec(), vec![w; values.len()])
    }

    fn build(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if atoms.len() != weights.len() || atoms.is_empty() {
            return Err(Error::Input(format!(
                "{} atoms and {} weights; need matching nonempty lists",
                atoms.len(),
                weights.len()
            )));
        }
        if let Some(a) = atoms.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
            return Err(Error::Input(format!("atom {a} is not a finite nonnegative value")));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::Input(format!("weight {w} is not positive")));
        }
        let mut pairs: Vec<(f64, f64)> = atoms.into_iter().zip(weights).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out_a: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut out_w: Vec<f64> = Vec::with_capacity(pairs.len());
        for (a, w) in pairs {
            match out_a.last() {
                Some(&last) if a - last <= MERGE_TOL => *out_w.last_mut().expect("paired") += w,
                _ => {
                    out_a.push(a);
                    out_w.push(w);
                }
            }
        }
        Ok(EmpiricalDist {
            atoms: out_a,
            weights: out_w,
        })
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(a, w)| a * w).sum()
    }

    pub fn mass_at_zero(&self) -> f64 {
        if self.atoms[0] == 0.0 {
            self.weights[0]
        } else {
            0.0
        }
    }
}

/// How the clip level relates to `μ` in the fixed-point equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Convention {
    /// `E[min{t, Cμ}] = μ`.
    #[default]
    ClipAtCMu,
    /// `E[min{t, C²μ}] = μ`: substituting `Cμ` into `F` literally.
    ClipAtCSquaredMu,
}

impl Convention {
    fn factor(self, c: f64) -> f64 {
        match self {
            Convention::ClipAtCMu => c,
            Convention::ClipAtCSquaredMu => c * c,
        }
    }
}

/// Shape of the root set of `G` on `[0, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    /// `P[t=0] < 1 − 1/C`: roots exactly `0` and `μ_{P,C} > 0`.
    TwoRoots,
    /// `P[t=0] = 1 − 1/C`: every `μ ∈ [0, M_{P,1/C}/C]` is a root.
    Interval,
    /// `P[t=0] > 1 − 1/C`: only `0`.
    ZeroOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClippedMeanResult {
    pub mu_c: f64,
    pub classification: Classification,
    pub m_inv_c: f64,
    /// `None` when `μ_{P,C} = 0`, where the ratio is undefined.
    pub alpha_c_bound: Option<f64>,
}

fn check_c(c: f64) -> Result<()> {
    if !(c > 1.0 && c.is_finite()) {
        return Err(Error::contract("clipstats", format!("C must be finite and > 1, got {c}")));
    }
    Ok(())
}

/// `F(μ) = E[min{t, Cμ}]`
pub fn f_clipped(p: &EmpiricalDist, c: f64, mu: f64) -> f64 {
    let level = c * mu;
    p.atoms.iter().zip(&p.weights).map(|(a, w)| w * a.min(level)).sum()
}

/// `G(μ) = F(μ) − μ`
pub fn g_clipped(p: &EmpiricalDist, c: f64, mu: f64) -> f64 {
    f_clipped(p, c, mu) - mu
}

/// `M_{P,1/C}`: the largest atom whose upper tail `P[t ≥ a]` carries at least `1/C`.
pub fn inv_c_median(p: &EmpiricalDist, c: f64) -> Result<f64> {
    check_c(c)?;
    Ok(inv_median_unchecked(p, c))
}

fn inv_median_unchecked(p: &EmpiricalDist, c: f64) -> f64 {
    let target = 1.0 / c - WEIGHT_TOL;
    let mut tail = 0.0;
    for (a, w) in p.atoms.iter().zip(&p.weights).rev() {
        tail += w;
        if tail >= target {
            return *a;
        }
    }
    p.atoms[0]
}

fn classify(p: &EmpiricalDist, k: f64) -> Classification {
    let threshold = 1.0 - 1.0 / k;
    let p0 = p.mass_at_zero();
    if (p0 - threshold).abs() <= WEIGHT_TOL {
        Classification::Interval
    } else if p0 < threshold {
        Classification::TwoRoots
    } else {
        Classification::ZeroOnly
    }
}

/// Largest `μ ≥ 0` with `E[min{t, Cμ}] = μ`, its classification, `M_{P,1/C}`, and the
/// `α_C` bound it supports.
pub fn clipped_mean(p: &EmpiricalDist, c: f64) -> Result<ClippedMeanResult> {
    clipped_mean_with(p, c, Convention::default())
}

pub fn clipped_mean_with(p: &EmpiricalDist, c: f64, convention: Convention) -> Result<ClippedMeanResult> {
    check_c(c)?;
    let k = convention.factor(c);
    let m = inv_median_unchecked(p, k);
    let classification = classify(p, k);
    let mu_c = match classification {
        Classification::ZeroOnly => 0.0,
        Classification::Interval => m / k,
        Classification::TwoRoots => largest_root(p, k, m / k),
    };
    let alpha = (mu_c > 0.0).then(|| truncated_mean(p, m) / mu_c);
    Ok(ClippedMeanResult {
        mu_c,
        classification,
        m_inv_c: m,
        alpha_c_bound: alpha,
    })
}

/// Bisection for the root of concave `G` on `[argmax, mean]`, where `G(argmax) > 0 ≥ G(mean)`.
fn largest_root(p: &EmpiricalDist, k: f64, argmax: f64) -> f64 {
    let g = |mu: f64| f_clipped(p, k, mu) - mu;
    let (mut lo, mut hi) = (argmax, p.mean());
    if g(hi) >= 0.0 {
        return hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // G(lo) > 0 ≥ G(hi) and they are adjacent floats
    if g(hi) == 0.0 {
        hi
    } else {
        0.5 * (lo + hi)
    }
}

/// `E[t·1[t < m]]`
fn truncated_mean(p: &EmpiricalDist, m: f64) -> f64 {
    p.atoms
        .iter()
        .zip(&p.weights)
        .filter(|(a, _)| **a < m)
        .map(|(a, w)| a * w)
        .sum()
}

/// `E[t·1[t < M_{P,1/C}]] / μ_{P,C}`, the largest `α_C` this distribution supports.
pub fn alpha_c_bound(p: &EmpiricalDist, c: f64) -> Result<f64> {
    clipped_mean(p, c)?
        .alpha_c_bound
        .ok_or_else(|| Error::domain("alpha_c_bound", "μ_{P,C} = 0, the bound is undefined"))
}

/// Grid check of concavity of `G`, the location of its maximum, and `M/C ≤ μ_{P,C} ≤ mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GPropertiesReport {
    pub concave: bool,
    pub argmax_ok: bool,
    pub sandwich_ok: bool,
    /// First grid point violating a property.
    pub witness: Option<f64>,
    pub passed: bool,
}

pub fn verify_g_properties(p: &EmpiricalDist, c: f64, grid_size: usize) -> Result<GPropertiesReport> {
    check_c(c)?;
    if grid_size < 3 {
        return Err(Error::contract("verify_g_properties", "grid needs at least 3 points"));
    }
    let mean = p.mean();
    let upper = if mean > 0.0 { mean * (1.0 + 1.0 / c) } else { 1.0 };
    let step = upper / (grid_size - 1) as f64;
    let grid: Vec<f64> = (0..grid_size).map(|i| i as f64 * step).collect();
    let vals: Vec<f64> = grid.iter().map(|&mu| g_clipped(p, c, mu)).collect();
    let scale = mean.max(upper) * 1e-12;

    let mut witness = None;
    let concave = (1..grid_size - 1).all(|i| {
        let ok = vals[i] >= 0.5 * (vals[i - 1] + vals[i + 1]) - scale;
        if !ok {
            witness.get_or_insert(grid[i]);
        }
        ok
    });

    let m = inv_median_unchecked(p, c);
    let peak = m / c;
    let g_peak = g_clipped(p, c, peak);
    let (imax, gmax) = vals
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    // G may be flat at its top; then any grid argmax is fine as long as the value matches
    let argmax_ok = gmax <= g_peak + scale && ((grid[imax] - peak).abs() <= step || (gmax - g_peak).abs() <= scale);
    if !argmax_ok {
        witness.get_or_insert(grid[imax]);
    }

    let mu = clipped_mean(p, c)?.mu_c;
    let sandwich_ok = peak <= mu + scale && mu <= mean + scale;
    if !sandwich_ok {
        witness.get_or_insert(mu);
    }
    Ok(GPropertiesReport {
        concave,
        argmax_ok,
        sandwich_ok,
        witness,
        passed: concave && argmax_ok && sandwich_ok,
    })
}

/// Distribution of `‖∇L_γ(x)‖²` over `n` sampled γ.
pub fn empirical_grad_dist(loss: &dyn StochasticLoss, x: &[f64], n: usize, seed: u64) -> Result<EmpiricalDist> {
    if n == 0 {
        return Err(Error::contract("empirical_grad_dist", "need at least one sample"));
    }
    let mut fam = loss.clone_box();
    fam.reset();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(n);
    for _ in 0..n {
        let s = fam.sample(&mut rng);
        vals.push(norm_sq(&fam.eval(s, x)?.grad));
    }
    EmpiricalDist::from_samples(&vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::StochasticRayleigh;
    use crate::tensor::Tensor;

    fn uniform(atoms: &[f64]) -> EmpiricalDist {
        EmpiricalDist::from_samples(atoms).unwrap()
    }

    #[test]
    fn rejects_bad_input() {
        assert!(EmpiricalDist::new(vec![1.0, 2.0], vec![0.5, 0.6]).is_err());
        assert!(EmpiricalDist::new(vec![-1.0, 2.0], vec![0.5, 0.5]).is_err());
        assert!(EmpiricalDist::new(vec![1.0, 2.0], vec![1.0, 0.0]).is_err());
        let d = EmpiricalDist::new(vec![2.0, 1.0, 1.0 + 1e-13], vec![0.5, 0.25, 0.25]).unwrap();
        assert_eq!(d.atoms(), &[1.0, 2.0]);
        assert_eq!(d.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn f_examples() {
        let p = uniform(&[1.0, 3.0]);
        assert_eq!(f_clipped(&p, 2.0, 0.0), 0.0);
        assert_eq!(f_clipped(&p, 2.0, 2.0), 2.0);
        assert_eq!(f_clipped(&p, 2.0, 1e12), p.mean());
    }

    #[test]
    fn clipped_mean_examples() {
        let r = clipped_mean(&uniform(&[1.0, 3.0]), 2.0).unwrap();
        assert!((r.mu_c - 2.0).abs() < 1e-12);
        assert_eq!(r.classification, Classification::TwoRoots);

        let r = clipped_mean(&uniform(&[0.0]), 2.0).unwrap();
        assert_eq!(r.mu_c, 0.0);
        assert_eq!(r.classification, Classification::ZeroOnly);

        let p = EmpiricalDist::new(vec![0.0, 4.0], vec![0.5, 0.5]).unwrap();
        let r = clipped_mean(&p, 2.0).unwrap();
        assert_eq!(r.classification, Classification::Interval);
        assert_eq!(r.mu_c, 2.0);
    }

    #[test]
    fn inverse_median_examples() {
        assert_eq!(inv_c_median(&uniform(&[5.0]), 3.0).unwrap(), 5.0);
        assert_eq!(inv_c_median(&uniform(&[1.0, 2.0, 3.0, 4.0]), 4.0).unwrap(), 4.0);
        assert_eq!(inv_c_median(&uniform(&[1.0, 3.0]), 2.0).unwrap(), 3.0);
    }

    #[test]
    fn g_properties_examples() {
        let p = uniform(&[1.0, 3.0]);
        assert!((g_clipped(&p, 2.0, 1.5) - 0.5).abs() < 1e-15);
        assert!(verify_g_properties(&p, 2.0, 1001).unwrap().passed);
        let z = uniform(&[0.0]);
        assert!(verify_g_properties(&z, 2.0, 101).unwrap().passed);
        assert!(g_clipped(&z, 2.0, 0.3) < 0.0);
    }

    #[test]
    fn alpha_examples() {
        assert!((alpha_c_bound(&uniform(&[1.0, 3.0]), 2.0).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(alpha_c_bound(&uniform(&[7.0]), 2.0).unwrap(), 0.0);
        assert!(matches!(alpha_c_bound(&uniform(&[0.0]), 2.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn literal_convention_uses_squared_factor() {
        // E[min(t, 4μ)] = μ on {1,3}: 4μ ≤ 1 is impossible at the root, so solve (1+3)/2 = μ → 2
        let r = clipped_mean_with(&uniform(&[1.0, 3.0]), 2.0, Convention::ClipAtCSquaredMu).unwrap();
        assert!((r.mu_c - 2.0).abs() < 1e-12);
        // P[0] = 1/2 < 3/4: two roots under the squared factor, interval under C
        let p = EmpiricalDist::new(vec![0.0, 4.0], vec![0.5, 0.5]).unwrap();
        let lit = clipped_mean_with(&p, 2.0, Convention::ClipAtCSquaredMu).unwrap();
        assert_eq!(lit.classification, Classification::TwoRoots);
        assert!((lit.mu_c - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_gives_single_atom() {
        let loss = StochasticRayleigh::new(Tensor::diag(&[1.0, 0.0]), 0.0).unwrap();
        let d = empirical_grad_dist(&loss, &[0.6, 0.8], 50, 1).unwrap();
        assert_eq!(d.atoms().len(), 1);
        let noisy = StochasticRayleigh::new(Tensor::diag(&[1.0, 0.0]), 0.5).unwrap();
        assert_eq!(
            empirical_grad_dist(&noisy, &[0.6, 0.8], 50, 1).unwrap(),
            empirical_grad_dist(&noisy, &[0.6, 0.8], 50, 1).unwrap()
        );
    }
}
