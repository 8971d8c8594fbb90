//! Closed-form losses with known homogeneity, and the stochastic-family interface the
//! optimizers consume.
//!
//! All losses act on a flat parameter vector. A family declares how that vector splits
//! into parameter groups and which groups the loss is invariant to.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homogeneity::estimate_rho;
use crate::tensor::Tensor;
use crate::vecmath::{dot, norm, norm_sq};

/// Loss value with its gradient over the whole flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// One contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub name: String,
    pub len: usize,
    pub scale_invariant: bool,
}

impl GroupSpec {
    pub fn new(name: &str, len: usize, scale_invariant: bool) -> Self {
        GroupSpec {
            name: name.to_string(),
            len,
            scale_invariant,
        }
    }
}

/// A family `{L_γ}` with a seeded sampler over γ.
///
/// Samples are opaque `u64` handles; `eval` must be a pure function of `(sample, x)` so a
/// trajectory is fully determined by the run seed.
pub trait StochasticLoss: Send + Sync {
    fn name(&self) -> &str;

    fn groups(&self) -> Vec<GroupSpec>;

    fn dim(&self) -> usize {
        self.groups().iter().map(|g| g.len).sum()
    }

    /// True when every group is scale invariant.
    fn is_scale_invariant(&self) -> bool {
        self.groups().iter().all(|g| g.scale_invariant)
    }

    /// Draws the next γ. Deterministic families return 0 without touching `rng`.
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> u64;

    /// Clears sampler state so a new run starts from the same point.
    fn reset(&mut self) {}

    fn eval(&self, sample: u64, x: &[f64]) -> Result<Evaluation>;

    /// `E_γ L_γ(x)` with its gradient.
    fn mean_eval(&self, x: &[f64]) -> Result<Evaluation>;

    /// A point with every group on its unit sphere, inside the loss's domain.
    fn random_unit_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        unit_per_group(&self.groups(), rng)
    }

    fn clone_box(&self) -> Box<dyn StochasticLoss>;
}

impl Clone for Box<dyn StochasticLoss> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

pub(crate) fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Gaussian direction normalized independently within each group.
pub fn unit_per_group(groups: &[GroupSpec], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::new();
    for g in groups {
        loop {
            let v = gaussian_vec(rng, g.len);
            let n = norm(&v);
            if n > 1e-8 {
                out.extend(v.iter().map(|x| x / n));
                break;
            }
        }
    }
    out
}

fn check_symmetric(op: &'static str, a: &Tensor) -> Result<usize> {
    let (m, n) = a.dims2(op)?;
    if m != n {
        return Err(Error::dim(op, format!("matrix must be square, got {m}×{n}")));
    }
    if !a.is_symmetric(1e-12) {
        return Err(Error::contract(op, "matrix must be symmetric"));
    }
    Ok(n)
}

/// `xᵀAx / xᵀx` with gradient `(2/‖x‖²)(Ax − L x)`.
pub fn rayleigh_loss(a: &Tensor, x: &[f64]) -> Result<Evaluation> {
    let d = check_symmetric("rayleigh_loss", a)?;
    if x.len() != d {
        return Err(Error::dim("rayleigh_loss", format!("matrix is {d}×{d}, x has {} entries", x.len())));
    }
    rayleigh_unchecked(a, x)
}

fn rayleigh_unchecked(a: &Tensor, x: &[f64]) -> Result<Evaluation> {
    let nsq = norm_sq(x);
    if nsq == 0.0 {
        return Err(Error::domain("rayleigh_loss", "x = 0"));
    }
    let ax = a.matvec(x)?;
    let loss = dot(x, &ax) / nsq;
    let grad = ax
        .iter()
        .zip(x)
        .map(|(axi, xi)| 2.0 / nsq * (axi - loss * xi))
        .collect();
    Ok(Evaluation { loss, grad })
}

/// `σ·atan2(x₂, x₁)` on the half-plane `x₁ > 0`; `‖∇L(x)‖·‖x‖ = σ` everywhere.
pub fn angle_loss(sigma: f64, x: &[f64]) -> Result<Evaluation> {
    if x.len() != 2 {
        return Err(Error::dim("angle_loss", format!("x must have 2 entries, has {}", x.len())));
    }
    if x[0] <= 0.0 || !x[0].is_finite() {
        return Err(Error::domain("angle_loss", format!("x₁ = {} is not in (0, ∞)", x[0])));
    }
    let nsq = norm_sq(x);
    Ok(Evaluation {
        loss: sigma * x[1].atan2(x[0]),
        grad: vec![-sigma * x[1] / nsq, sigma * x[0] / nsq],
    })
}

/// `ln(1 + e^v)` without overflow.
fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `L̃(X) = Σ ln(1 + e^{−z y X})` and its derivative `L̃′(X)`.
pub fn scalar_logistic(data: &[(f64, f64)], big_x: f64) -> (f64, f64) {
    data.iter().fold((0.0, 0.0), |(l, d), &(z, y)| {
        let m = z * y;
        (l + softplus(-m * big_x), d - m * sigmoid(-m * big_x))
    })
}

/// Minimizer of the convex scalar logistic loss, by bisection on `L̃′`.
pub fn scalar_logistic_minimizer(data: &[(f64, f64)]) -> Result<f64> {
    check_non_separable(data)?;
    let dl = |v: f64| scalar_logistic(data, v).1;
    let (mut lo, mut hi) = (-1.0, 1.0);
    while dl(lo) > 0.0 {
        lo *= 2.0;
    }
    while dl(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dl(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn check_non_separable(data: &[(f64, f64)]) -> Result<()> {
    let pos = data.iter().any(|&(z, y)| z * y > 0.0);
    let neg = data.iter().any(|&(z, y)| z * y < 0.0);
    if !(pos && neg) {
        return Err(Error::contract(
            "product_logistic_loss",
            "data must contain both sign patterns of z·y",
        ));
    }
    Ok(())
}

/// `L̃(x₁⋯x_{2k})` with `∂L/∂x_j = (X/x_j)·L̃′(X)`.
pub fn product_logistic_loss(data: &[(f64, f64)], k: usize, x: &[f64]) -> Result<Evaluation> {
    if k < 2 {
        return Err(Error::contract("product_logistic_loss", "k must be at least 2"));
    }
    if x.len() != 2 * k {
        return Err(Error::dim(
            "product_logistic_loss",
            format!("x must have {} entries, has {}", 2 * k, x.len()),
        ));
    }
    check_non_separable(data)?;
    if x.contains(&0.0) {
        return Err(Error::domain("product_logistic_loss", "gradient undefined with a zero factor"));
    }
    let big_x: f64 = x.iter().product();
    let (loss, dl) = scalar_logistic(data, big_x);
    let grad = x.iter().map(|&xj| big_x / xj * dl).collect();
    Ok(Evaluation { loss, grad })
}

/// Gradients of `½‖ABᵀ − Y‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatFacEvaluation {
    pub loss: f64,
    pub grad_a: Tensor,
    pub grad_b: Tensor,
}

pub fn matfac_loss(y: &Tensor, a: &Tensor, b: &Tensor) -> Result<MatFacEvaluation> {
    let (ya, yb) = y.dims2("matfac_loss")?;
    let (da, ra) = a.dims2("matfac_loss")?;
    let (db, rb) = b.dims2("matfac_loss")?;
    if da != ya || db != yb || ra != rb {
        return Err(Error::dim(
            "matfac_loss",
            format!("Y {ya}×{yb}, A {da}×{ra}, B {db}×{rb}"),
        ));
    }
    let abt = a.matmul(&b.transpose()?)?;
    let resid = abt.with_data(crate::vecmath::sub(abt.data(), y.data()))?;
    Ok(MatFacEvaluation {
        loss: 0.5 * norm_sq(resid.data()),
        grad_a: resid.matmul(b)?,
        grad_b: resid.transpose()?.matmul(a)?,
    })
}

/// `R(A,x)·R(B,y) + R(A,x)`: invariant to scaling `x` and `y` independently.
pub fn multigroup_loss(a: &Tensor, b: &Tensor, x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let rx = rayleigh_loss(a, x)?;
    let ry = rayleigh_loss(b, y)?;
    let loss = rx.loss * ry.loss + rx.loss;
    let gx = rx.grad.iter().map(|g| g * (ry.loss + 1.0)).collect();
    let gy = ry.grad.iter().map(|g| g * rx.loss).collect();
    Ok((loss, gx, gy))
}

/// Deterministic Rayleigh quotient on `ℝ^d`.
#[derive(Debug, Clone)]
pub struct Rayleigh {
    a: Tensor,
}

impl Rayleigh {
    pub fn new(a: Tensor) -> Result<Self> {
        check_symmetric("Rayleigh::new", &a)?;
        Ok(Rayleigh { a })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.a
    }
}

impl StochasticLoss for Rayleigh {
    fn name(&self) -> &str {
        "rayleigh"
    }

    fn groups(&self) -> Vec<GroupSpec> {
        vec![GroupSpec::new("x", self.a.shape()[0], true)]
    }

    fn sample(&mut self, _rng: &mut ChaCha8Rng) -> u64 {
        0
    }

    fn eval(&self, _sample: u64, x: &[f64]) -> Result<Evaluation> {
        self.mean_eval(x)
    }

    fn mean_eval(&self, x: &[f64]) -> Result<Evaluation> {
        rayleigh_loss(&self.a, x)
    }

    fn clone_box(&self) -> Box<dyn StochasticLoss> {
        Box::new(self.clone())
    }
}

/// `L_γ = γ·angle_loss` with antithetic signs: γ alternates `s, −s` with `s = ±1` drawn
/// once per pair.
///
/// Every sample has sphere-gradient norm exactly σ, and the pairing keeps the iterate's
/// direction near the positive `x₁` axis so it never reaches the branch cut.
#[derive(Debug, Clone)]
pub struct AngleFamily {
    sigma: f64,
    pending: Option<u64>,
}

impl AngleFamily {
    pub fn new(sigma: f64) -> Self {
        AngleFamily { sigma, pending: None }
    }
}

impl StochasticLoss for AngleFamily {
    fn name(&self) -> &str {
        "angle"
    }

    fn groups(&self) -> Vec<GroupSpec> {
        vec![GroupSpec::new("x", 2, true)]
    }

    fn sample(&mut self, rng: &mut ChaCha8Rng) -> u64 {
        match self.pending.take() {
            Some(s) => s,
            None => {
                let s = u64::from(rng.gen_bool(0.5));
                self.pending = Some(1 - s);
                s
            }
        }
    }

    fn reset(&mut self) {
        self.pending = None;
    }

    fn eval(&self, sample: u64, x: &[f64]) -> Result<Evaluation> {
        let sign = if sample == 0 { 1.0 } else { -1.0 };
        angle_loss(sign * self.sigma, x)
    }

    /// The two signs average to the zero function.
    fn mean_eval(&self, x: &[f64]) -> Result<Evaluation> {
        angle_loss(0.0, x)
    }

    fn random_unit_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let t: f64 = rng.gen_range(-1.5..1.5);
        vec![t.cos(), t.sin()]
    }

    fn clone_box(&self) -> Box<dyn StochasticLoss> {
        Box::new(self.clone())
    }
}

/// Logistic loss on a `2k`-fold product; not scale invariant.
#[derive(Debug, Clone)]
pub struct ProductLogistic {
    pub data: Vec<(f64, f64)>,
    pub k: usize,
}

impl StochasticLoss for ProductLogistic {
    fn name(&self) -> &str {
        "example1"
    }

    fn groups(&self) -> Vec<GroupSpec> {
        vec![GroupSpec::new("x", 2 * self.k, false)]
    }

    fn sample(&mut self, _rng: &mut ChaCha8Rng) -> u64 {
        0
    }

    fn eval(&self, _sample: u64, x: &[f64]) -> Result<Evaluation> {
        self.mean_eval(x)
    }

    fn mean_eval(&self, x: &[f64]) -> Result<Evaluation> {
        product_logistic_loss(&self.data, self.k, x)
    }

    fn clone_box(&self) -> Box<dyn StochasticLoss> {
        Box::new(self.clone())
    }
}

/// `½‖ABᵀ − Y‖²` over the flat vector `[vec(A), vec(B)]`.
#[derive(Debug, Clone)]
pub struct MatFac {
    y: Tensor,
    rank: usize,
}

impl MatFac {
    pub fn new(y: Tensor, rank: usize) -> Result<Self> {
        y.dims2("MatFac::new")?;
        if rank == 0 {
            return Err(Error::contract("MatFac::new", "rank must be positive"));
        }
        Ok(MatFac { y, rank })
    }

    fn split(&self, x: &[f64]) -> Result<(Tensor, Tensor)> {
        let (m, n) = (self.y.shape()[0], self.y.shape()[1]);
        let na = m * self.rank;
        if x.len() != na + n * self.rank {
            return Err(Error::dim("MatFac", format!("expected {} entries, got {}", na + n * self.rank, x.len())));
        }
        Ok((
            Tensor::new(vec![m, self.rank], x[..na].to_vec())?,
            Tensor::new(vec![n, self.rank], x[na..].to_vec())?,
        ))
    }
}

impl StochasticLoss for MatFac {
    fn name(&self) -> &str {
        "example2"
    }

    fn groups(&self) -> Vec<GroupSpec> {
        let (m, n) = (self.y.shape()[0], self.y.shape()[1]);
        vec![GroupSpec::new("ab", (m + n) * self.rank, false)]
    }

    fn sample(&mut self, _rng: &mut ChaCha8Rng) -> u64 {
        0
    }

    fn eval(&self, _sample: u64, x: &[f64]) -> Result<Evaluation> {
        self.mean_eval(x)
    }

    fn mean_eval(&self, x: &[f64]) -> Result<Evaluation> {
        let (a, b) = self.split(x)?;
        let e = matfac_loss(&self.y, &a, &b)?;
        let mut grad = e.grad_a.into_data();
        grad.extend(e.grad_b.into_data());
        Ok(Evaluation { loss: e.loss, grad })
    }

    fn clone_box(&self) -> Box<dyn StochasticLoss> {
        Box::new(self.clone())
    }
}

/// Rayleigh quotients of `A_γ = A_mean + s·(S + Sᵀ)/2` with `S_ij ~ U[−1, 1]`.
///
/// With probability `spike_prob` the noise amplitude `s` is `noise_scale·spike_factor`,
/// otherwise `noise_scale`, which gives a bounded but heavy-tailed gradient distribution.
#[derive(Debug, Clone)]
pub struct StochasticRayleigh {
    a_mean: Tensor,
    noise_scale: f64,
    spike_prob: f64,
    spike_factor: f64,
}

impl StochasticRayleigh {
    pub fn new(a_mean: Tensor, noise_scale: f64) -> Result<Self> {
        check_symmetric("StochasticRayleigh::new", &a_mean)?;
        if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
            return Err(Error::contract("StochasticRayleigh::new", "noise_scale must be finite and ≥ 0"));
        }
        Ok(StochasticRayleigh {
            a_mean,
            noise_scale,
            spike_prob: 0.0,
            spike_factor: 1.0,
        })
    }

    pub fn with_spikes(mut self, prob: f64, factor: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&prob) || !(factor >= 1.0 && factor.is_finite()) {
            return Err(Error::contract("StochasticRayleigh::with_spikes", "need prob ∈ [0,1], factor ≥ 1"));
        }
        self.spike_prob = prob;
        self.spike_factor = factor;
        Ok(self)
    }

    /// The matrix `A_γ` for a sample handle.
    pub fn sample_matrix(&self, sample: u64) -> Tensor {
        let d = self.a_mean.shape()[0];
        if self.noise_scale == 0.0 {
            return self.a_mean.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sample);
        let spike = self.spike_prob > 0.0 && rng.gen_bool(self.spike_prob);
        let s = if spike {
            self.noise_scale * self.spike_factor
        } else {
            self.noise_scale
        };
        let noise: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let mut data = self.a_mean.data().to_vec();
        for i in 0..d {
            for j in 0..d {
                data[i * d + j] += s * 0.5 * (noise[i * d + j] + noise[j * d + i]);
            }
        }
        Tensor::new(vec![d, d], data).expect("square")
    }
}

impl StochasticLoss for StochasticRayleigh {
    fn name(&self) -> &str {
        "stoch-rayleigh"
    }

    fn groups(&self) -> Vec<GroupSpec> {
        vec![GroupSpec::new("x", self.a_mean.shape()[0], true)]
    }

    fn sample(&mut self, rng: &mut ChaCha8Rng) -> u64 {
        rng.gen()
    }

    fn eval(&self, sample: u64, x: &[f64]) -> Result<Evaluation> {
        let d = self.a_mean.shape()[0];
        if x.len() != d {
            return Err(Error::dim("StochasticRayleigh", format!("x has {} entries, need {d}", x.len())));
        }
        rayleigh_unchecked(&self.sample_matrix(sample), x)
    }

    fn mean_eval(&self, x: &[f64]) -> Result<Evaluation> {
        rayleigh_loss(&self.a_mean, x)
    }

    fn clone_box(&self) -> Box<dyn StochasticLoss> {
        Box::new(self.clone())
    }
}

/// Two independently scale-invariant groups `x` and `y`.
#[derive(Debug, Clone)]
pub struct MultiGroup {
    a: Tensor,
    b: Tensor,
}

impl MultiGroup {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        check_symmetric("MultiGroup::new", &a)?;
        check_symmetric("MultiGroup::new", &b)?;
        Ok(MultiGroup { a, b })
    }
}

impl StochasticLoss for MultiGroup {
    fn name(&self) -> &str {
        "multigroup"
    }

    fn groups(&self) -> Vec<GroupSpec> {
        vec![
            GroupSpec::new("x", self.a.shape()[0], true),
            GroupSpec::new("y", self.b.shape()[0], true),
        ]
    }

    fn sample(&mut self, _rng: &mut ChaCha8Rng) -> u64 {
        0
    }

    fn eval(&self, _sample: u64, x: &[f64]) -> Result<Evaluation> {
        self.mean_eval(x)
    }

    fn mean_eval(&self, x: &[f64]) -> Result<Evaluation> {
        let d1 = self.a.shape()[0];
        if x.len() != d1 + self.b.shape()[0] {
            return Err(Error::dim("MultiGroup", "parameter length does not match the two groups"));
        }
        let (loss, mut gx, gy) = multigroup_loss(&self.a, &self.b, &x[..d1], &x[d1..])?;
        gx.extend(gy);
        Ok(Evaluation { loss, grad: gx })
    }

    fn clone_box(&self) -> Box<dyn StochasticLoss> {
        Box::new(self.clone())
    }
}

/// `c·L` for a wrapped family, sharing its sampler.
pub struct Scaled {
    inner: Box<dyn StochasticLoss>,
    c: f64,
}

impl Scaled {
    pub fn new(inner: Box<dyn StochasticLoss>, c: f64) -> Self {
        Scaled { inner, c }
    }

    fn apply(&self, mut e: Evaluation) -> Evaluation {
        e.loss *= self.c;
        e.grad.iter_mut().for_each(|g| *g *= self.c);
        e
    }
}

impl StochasticLoss for Scaled {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn groups(&self) -> Vec<GroupSpec> {
        self.inner.groups()
    }

    fn sample(&mut self, rng: &mut ChaCha8Rng) -> u64 {
        self.inner.sample(rng)
    }

    fn reset(&mut self) {
        self.inner.reset()
    }

    fn eval(&self, sample: u64, x: &[f64]) -> Result<Evaluation> {
        Ok(self.apply(self.inner.eval(sample, x)?))
    }

    fn mean_eval(&self, x: &[f64]) -> Result<Evaluation> {
        Ok(self.apply(self.inner.mean_eval(x)?))
    }

    fn random_unit_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.inner.random_unit_point(rng)
    }

    fn clone_box(&self) -> Box<dyn StochasticLoss> {
        Box::new(Scaled {
            inner: self.inner.clone_box(),
            c: self.c,
        })
    }
}

/// Measured constants of a scale-invariant family on the unit sphere.
///
/// `m_max`, `sigma_lo_sq` and `sigma_hi_sq` are sampled (and locally searched) extremes; [`LossProfile::envelope`]
/// widens them. `rho` comes from [`estimate_rho`], which already includes its widening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossProfile {
    pub rho: f64,
    pub rho_converged: bool,
    /// Largest sampled `‖∇L_γ(x̄)‖`.
    pub m_max: f64,
    /// Smallest and largest per-point mean of `‖∇L_γ(x̄)‖²`.
    pub sigma_lo_sq: f64,
    pub sigma_hi_sq: f64,
}

pub const PROFILE_WIDENING: f64 = 0.1;

impl LossProfile {
    /// Conservative bounds: `σ̲²` shrunk and `σ̄²`, `M` grown by 10%.
    pub fn envelope(&self) -> LossProfile {
        LossProfile {
            m_max: self.m_max * (1.0 + PROFILE_WIDENING),
            sigma_lo_sq: self.sigma_lo_sq * (1.0 - PROFILE_WIDENING),
            sigma_hi_sq: self.sigma_hi_sq * (1.0 + PROFILE_WIDENING),
            ..self.clone()
        }
    }
}

/// Per-group `|⟨∇_k L, x_k⟩| / (‖∇_k L‖‖x_k‖)`, worst over groups.
pub fn euler_residual(groups: &[GroupSpec], x: &[f64], grad: &[f64]) -> f64 {
    let mut offset = 0;
    let mut worst: f64 = 0.0;
    for g in groups {
        let (xs, gs) = (&x[offset..offset + g.len], &grad[offset..offset + g.len]);
        offset += g.len;
        let r = dot(gs, xs).abs() / (norm(gs) * norm(xs) + 1e-30);
        worst = worst.max(r);
    }
    worst
}

/// Samples sphere points and γ to measure `ρ`, `M`, `σ̲²`, `σ̄²`; the σ extremes are then polished
/// by local search.
pub fn profile_loss(loss: &dyn StochasticLoss, n_sphere: usize, n_gamma: usize, seed: u64) -> Result<LossProfile> {
    if n_sphere == 0 || n_gamma == 0 {
        return Err(Error::contract("profile_loss", "need at least one sphere point and one sample"));
    }
    let groups = loss.groups();
    if groups.iter().any(|g| !g.scale_invariant) {
        return Err(Error::contract("profile_loss", "every group must be scale invariant"));
    }
    let mut fam = loss.clone_box();
    fam.reset();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..3 {
        let x = fam.random_unit_point(&mut rng);
        let s = fam.sample(&mut rng);
        for e in [fam.mean_eval(&x)?, fam.eval(s, &x)?] {
            let r = euler_residual(&groups, &x, &e.grad);
            if r > 1e-6 {
                return Err(Error::contract(
                    "profile_loss",
                    format!("Euler residual {r:e}: loss is not scale invariant"),
                ));
            }
        }
    }
    let rho = estimate_rho(loss, n_sphere, 100, seed)?;
    let (mut m_max, mut lo, mut hi) = (0.0f64, (f64::INFINITY, Vec::new()), (0.0f64, Vec::new()));
    for _ in 0..n_sphere {
        let x = fam.random_unit_point(&mut rng);
        let mut acc = 0.0;
        for _ in 0..n_gamma {
            let s = fam.sample(&mut rng);
            let g = norm(&fam.eval(s, &x)?.grad);
            m_max = m_max.max(g);
            acc += g * g;
        }
        let mean = acc / n_gamma as f64;
        if mean < lo.0 {
            lo = (mean, x.clone());
        }
        if mean > hi.0 {
            hi = (mean, x);
        }
    }
    // Sampling alone overestimates the infimum: trajectories settle exactly where the noise is
    // weakest. Polish both extremes by local search on a fixed set of samples.
    let gammas: Vec<u64> = (0..n_gamma).map(|_| fam.sample(&mut rng)).collect();
    let lo_sq = polish(fam.as_ref(), &groups, &gammas, &lo.1, -1.0, &mut rng)?.min(lo.0);
    let hi_sq = polish(fam.as_ref(), &groups, &gammas, &hi.1, 1.0, &mut rng)?.max(hi.0);
    let (sigma_lo_sq, sigma_hi_sq) = (lo_sq, hi_sq);
    Ok(LossProfile {
        rho: rho.rho,
        rho_converged: rho.converged,
        m_max,
        sigma_lo_sq,
        sigma_hi_sq,
    })
}

const POLISH_STEPS: usize = 300;

/// Random-perturbation search on the sphere for the extreme (`direction` −1: min, +1: max)
/// of the mean squared gradient norm over `gammas`, started at `start`.
fn polish(
    fam: &dyn StochasticLoss,
    groups: &[GroupSpec],
    gammas: &[u64],
    start: &[f64],
    direction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let objective = |x: &[f64]| -> Result<f64> {
        let mut acc = 0.0;
        for &s in gammas {
            acc += norm_sq(&fam.eval(s, x)?.grad);
        }
        Ok(acc / gammas.len() as f64)
    };
    let mut best_x = start.to_vec();
    let mut best = objective(&best_x)?;
    let mut radius = 0.5;
    for _ in 0..POLISH_STEPS {
        let step = fam.random_unit_point(rng);
        let mut cand: Vec<f64> = best_x.iter().zip(&step).map(|(a, b)| a + radius * b).collect();
        let mut offset = 0;
        for g in groups {
            let seg = &mut cand[offset..offset + g.len];
            offset += g.len;
            let n = norm(seg);
            if n > 0.0 {
                seg.iter_mut().for_each(|v| *v /= n);
            }
        }
        let v = match objective(&cand) {
            Ok(v) => v,
            Err(Error::Domain { .. }) => continue,
            Err(e) => return Err(e),
        };
        if direction * v > direction * best {
            best = v;
            best_x = cand;
        } else {
            radius = (radius * 0.97).max(1e-3);
        }
    }
    Ok(best)
}
