//! Executable property suites, one per module, reported as one line per check.

use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::run::{cmd_clipstats, max_r_deviation, parse_dist_csv, sweep_into, train_into};
use crate::bounds;
use crate::clipstats::{
    clipped_mean, f_clipped, g_clipped, inv_c_median, verify_g_properties, Classification, EmpiricalDist,
};
use crate::error::{Error, Result};
use crate::gradcheck::{numeric_grad, rel_error};
use crate::homogeneity::{
    check_equivalent_scaling, check_gradient_degree, check_homogeneity, estimate_rho, ScalingMode,
};
use crate::losses::{
    product_logistic_loss, profile_loss, scalar_logistic, AngleFamily, Evaluation, MatFac, MultiGroup,
    ProductLogistic, Rayleigh, StochasticLoss, StochasticRayleigh,
};
use crate::optim::{groups_from_flat, run_training, OptimizerConfig, Trajectory};
use crate::sinet::{degree_audit, init_model, AttentionKind, MaskedTokenTask, SinetConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vecmath::{dot, norm, scaled};

pub const MODULES: [&str; 7] = [
    "core_tensor",
    "si_losses",
    "optimizers",
    "homogeneity",
    "clipstats",
    "sinet",
    "harness",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub module: &'static str,
    pub name: String,
    /// The check's own verdict, before negative-control inversion.
    pub held: bool,
    /// A negative control is supposed to fail.
    pub negative_control: bool,
    pub detail: String,
}

impl CheckLine {
    pub fn ok(&self) -> bool {
        self.held != self.negative_control
    }

    pub fn render(&self) -> String {
        let tag = match (self.ok(), self.negative_control) {
            (true, false) => "PASS",
            (true, true) => "FAIL (expected: negative control)",
            (false, false) => "FAIL",
            (false, true) => "FAIL (negative control unexpectedly passed)",
        };
        format!("{tag} {}/{}: {}", self.module, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub lines: Vec<CheckLine>,
}

impl VerifyReport {
    pub fn all_ok(&self) -> bool {
        self.lines.iter().all(CheckLine::ok)
    }

    pub fn exit_code(&self) -> i32 {
        i32::from(!self.all_ok())
    }
}

/// `["all"]` or an empty list selects every module.
pub fn parse_scope(scope: &[String]) -> Result<Vec<&'static str>> {
    if scope.is_empty() || scope.iter().any(|s| s == "all") {
        return Ok(MODULES.to_vec());
    }
    scope
        .iter()
        .map(|s| {
            MODULES
                .iter()
                .find(|m| **m == s.as_str())
                .copied()
                .ok_or_else(|| Error::Input(format!("unknown module `{s}`; expected one of {MODULES:?} or all")))
        })
        .collect()
}

/// Runs the suites in scope, printing each line to `out` as it completes.
pub fn cmd_verify(scope: &[String], out: &mut dyn Write) -> Result<VerifyReport> {
    let modules = parse_scope(scope)?;
    let mut report = VerifyReport::default();
    for m in modules {
        let suite: Vec<Check> = match m {
            "core_tensor" => core_tensor_checks(),
            "si_losses" => loss_checks(),
            "optimizers" => optimizer_checks(),
            "homogeneity" => homogeneity_checks(),
            "clipstats" => clipstats_checks(),
            "sinet" => sinet_checks(),
            _ => harness_checks(),
        };
        for c in suite {
            let (held, detail) = match (c.run)() {
                Ok(v) => v,
                Err(e) => (false, format!("error: {e}")),
            };
            let line = CheckLine {
                module: m,
                name: c.name.to_string(),
                held,
                negative_control: c.negative_control,
                detail,
            };
            writeln!(out, "{}", line.render())?;
            report.lines.push(line);
        }
    }
    Ok(report)
}

type Outcome = Result<(bool, String)>;

struct Check {
    name: &'static str,
    negative_control: bool,
    run: Box<dyn Fn() -> Outcome>,
}

fn check(name: &'static str, run: impl Fn() -> Outcome + 'static) -> Check {
    Check {
        name,
        negative_control: false,
        run: Box::new(run),
    }
}

fn bounded(name: &str, value: f64, limit: f64) -> (bool, String) {
    (value <= limit, format!("{name} {value:.3e} (limit {limit:.0e})"))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

fn gaussian(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(rand_distr::StandardNormal)).collect()
}

// ---------------------------------------------------------------- core_tensor

const FD_H: f64 = 1e-6;
const FD_TOL: f64 = 1e-5;
const FD_SEEDS: u64 = 100;

type Build = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Tape gradient of `build(x)` against central differences.
fn tape_fd(x: &[f64], shape: &[usize], build: &dyn Fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let eval = |v: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::new(shape.to_vec(), v.to_vec())?);
        let root = build(&mut tape, leaf)?;
        Ok(tape.value(root).item())
    };
    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor::new(shape.to_vec(), x.to_vec())?);
    let root = build(&mut tape, leaf)?;
    tape.backward(root)?;
    let analytic = tape.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
    Ok(rel_error(&analytic, &numeric_grad(eval, x, FD_H)?, 1e-12))
}

/// Contracts with fixed weights so every output entry reaches the scalar root.
fn contract(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = t.value(v).shape().to_vec();
    let n = t.value(v).numel();
    let w = t.constant(Tensor::new(shape, uniform(&mut rng(seed ^ 0xa5a5), n, -1.0, 1.0))?);
    let p = t.mul(v, w)?;
    Ok(t.sum(p))
}

/// Entries in ±[0.05, 2] so relu kinks are never inside the stencil.
fn away_from_zero(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = r.gen_range(0.05..2.0);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// One case per op: input shape, input sampler, and graph.
fn op_cases(seed: u64) -> Vec<(&'static str, Vec<usize>, Vec<f64>, Build)> {
    let mut r = rng(seed);
    let m3 = Tensor::new(vec![3, 3], uniform(&mut r, 9, -1.0, 1.0)).expect("3x3");
    let row = Tensor::vector(uniform(&mut r, 3, 0.5, 1.5));
    let pos = uniform(&mut r, 9, 0.2, 2.0);
    let signed = away_from_zero(&mut r, 9);
    let general = uniform(&mut r, 9, -1.0, 1.0);
    let (m_a, m_b, m_c, row_a, row_b) = (m3.clone(), m3.clone(), m3.clone(), row.clone(), row.clone());
    let ids = vec![2usize, 0, 2, 1];
    let targets = vec![Some(1usize), None, Some(2)];
    vec![
        (
            "matmul",
            vec![3, 3],
            general.clone(),
            Box::new(move |t: &mut Tape, x| {
                let c = t.constant(m_a.clone());
                let p = t.matmul(x, c)?;
                let q = t.matmul(c, p)?;
                contract(t, q, seed)
            }),
        ),
        (
            "matmul_bt",
            vec![3, 3],
            general.clone(),
            Box::new(move |t: &mut Tape, x| {
                let c = t.constant(m_b.clone());
                let p = t.matmul_bt(x, c)?;
                let q = t.matmul_bt(p, x)?;
                contract(t, q, seed)
            }),
        ),
        (
            "add_sub_mul",
            vec![3, 3],
            general.clone(),
            Box::new(move |t: &mut Tape, x| {
                let c = t.constant(m_c.clone());
                let a = t.add(x, c)?;
                let s = t.sub(a, x)?;
                let p = t.mul(x, a)?;
                let z = t.add(p, s)?;
                let z = t.scale(z, -1.7);
                contract(t, z, seed)
            }),
        ),
        (
            "div",
            vec![3, 3],
            pos.clone(),
            Box::new(move |t: &mut Tape, x| {
                let sq = t.mul(x, x)?;
                let d = t.div(sq, x)?;
                let e = t.div(x, sq)?;
                let z = t.add(d, e)?;
                contract(t, z, seed)
            }),
        ),
        (
            "row_broadcast",
            vec![3, 3],
            general.clone(),
            Box::new(move |t: &mut Tape, x| {
                let r = t.constant(row_a.clone());
                let a = t.add_row(x, r)?;
                let m = t.mul_row(a, r)?;
                contract(t, m, seed)
            }),
        ),
        (
            "relu",
            vec![3, 3],
            signed,
            Box::new(move |t: &mut Tape, x| {
                let r = t.relu(x);
                contract(t, r, seed)
            }),
        ),
        (
            "row_normalize_sum",
            vec![3, 3],
            pos,
            Box::new(move |t: &mut Tape, x| {
                let r = t.row_normalize_sum(x)?;
                contract(t, r, seed)
            }),
        ),
        (
            "layer_norm",
            vec![3, 3],
            general.clone(),
            Box::new(move |t: &mut Tape, x| {
                let plain = t.layer_norm(x, None)?;
                let g = t.constant(row_b.clone());
                let b = t.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
                let aff = t.layer_norm(x, Some((g, b)))?;
                let z = t.add(plain, aff)?;
                contract(t, z, seed)
            }),
        ),
        (
            "softmax_rows",
            vec![3, 3],
            general.clone(),
            Box::new(move |t: &mut Tape, x| {
                let s = t.softmax_rows(x);
                contract(t, s, seed)
            }),
        ),
        (
            "gather_slice_concat",
            vec![3, 3],
            general.clone(),
            Box::new(move |t: &mut Tape, x| {
                let g = t.gather_rows(x, &ids)?;
                let a = t.slice_rows(g, 1, 2)?;
                let b = t.slice_rows(x, 0, 1)?;
                let c = t.concat_rows(&[b, a, b])?;
                let s = t.sum_squares(c);
                let w = contract(t, c, seed)?;
                t.add(s, w)
            }),
        ),
        (
            "cross_entropy",
            vec![3, 3],
            general,
            Box::new(move |t: &mut Tape, x| t.cross_entropy(x, &targets)),
        ),
    ]
}

fn core_tensor_checks() -> Vec<Check> {
    let mut checks = vec![check("backward-matches-finite-differences", || {
        let mut worst = (0.0f64, "", 0u64);
        for seed in 0..FD_SEEDS {
            for (name, shape, x, build) in op_cases(seed) {
                let e = tape_fd(&x, &shape, build.as_ref())?;
                if !(e <= worst.0) {
                    worst = (e, name, seed);
                }
            }
        }
        let (ok, msg) = bounded("worst rel err", worst.0, FD_TOL);
        Ok((ok, format!("{msg} at op {} seed {} over {FD_SEEDS} seeds", worst.1, worst.2)))
    })];
    checks.push(check("relu-norm-ops-exact-scaling", || {
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let x = Tensor::new(vec![4, 5], gaussian(&mut rng(seed), 20))?;
            let pos = x.map(f64::abs);
            for c in [1e-3, 1.0, 1e3] {
                for (k, input, op) in [(1, &x, 0), (0, &pos, 1), (0, &x, 2)] {
                    let f = |v: &Tensor| -> Result<Tensor> {
                        let mut t = Tape::new();
                        let a = t.constant(v.clone());
                        let out = match op {
                            0 => t.relu(a),
                            1 => t.row_normalize_sum(a)?,
                            _ => t.layer_norm(a, None)?,
                        };
                        Ok(t.value(out).clone())
                    };
                    let base = f(input)?;
                    let got = f(&input.scale(c))?;
                    let want = base.scale(f64::powi(c, k));
                    worst = worst.max(rel_error(got.data(), want.data(), 1e-300));
                }
            }
        }
        Ok(bounded("worst rel err", worst, 1e-12))
    }));
    checks.push(check("uniform-row-normalize-gradient-orthogonal-to-ones", || {
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let mut r = rng(seed);
            let a = r.gen_range(0.1..5.0);
            let mut t = Tape::new();
            let x = t.leaf(Tensor::filled(&[1, 6], a));
            let y = t.row_normalize_sum(x)?;
            let root = contract(&mut t, y, seed)?;
            t.backward(root)?;
            let g = t.grad(x).unwrap_or(&[]);
            worst = worst.max(g.iter().sum::<f64>().abs() / (norm(g) + 1e-300).max(1.0));
        }
        Ok(bounded("|⟨∇, 1⟩|", worst, 1e-12))
    }));
    checks
}

// ---------------------------------------------------------------- si_losses

fn random_symmetric(r: &mut ChaCha8Rng, d: usize) -> Tensor {
    let g = gaussian(r, d * d);
    let mut s = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            s[i * d + j] = 0.5 * (g[i * d + j] + g[j * d + i]);
        }
    }
    Tensor::new(vec![d, d], s).expect("square")
}

/// Every shipped scale-invariant family, with deterministic instances.
pub fn invariant_losses() -> Vec<Box<dyn StochasticLoss>> {
    let mut r = rng(71);
    vec![
        Box::new(Rayleigh::new(random_symmetric(&mut r, 5)).expect("symmetric")),
        Box::new(AngleFamily::new(1.3)),
        Box::new(
            StochasticRayleigh::new(random_symmetric(&mut r, 4), 0.5)
                .expect("symmetric")
                .with_spikes(0.1, 5.0)
                .expect("valid spikes"),
        ),
        Box::new(MultiGroup::new(random_symmetric(&mut r, 3), random_symmetric(&mut r, 2)).expect("symmetric")),
    ]
}

/// Evaluations at a fixed sample so stochastic families are deterministic functions.
fn sampled_eval(loss: &dyn StochasticLoss, seed: u64) -> impl Fn(&[f64]) -> Result<Evaluation> + '_ {
    let mut fam = loss.clone_box();
    let s = fam.sample(&mut rng(seed));
    move |x: &[f64]| fam.eval(s, x)
}

fn loss_checks() -> Vec<Check> {
    vec![
        check("invariant-losses-are-scale-invariant", || {
            let mut worst = 0.0f64;
            for loss in invariant_losses() {
                let mut r = rng(5);
                for i in 0..20 {
                    let x = scaled(&loss.random_unit_point(&mut r), r.gen_range(0.1..10.0));
                    let f = sampled_eval(loss.as_ref(), i);
                    let base = f(&x)?.loss;
                    for c in [1e-3, 1e3] {
                        let v = f(&scaled(&x, c))?.loss;
                        worst = worst.max((v - base).abs() / base.abs().max(1e-300));
                    }
                }
            }
            Ok(bounded("worst rel err", worst, 1e-12))
        }),
        check("euler-identity-and-gradient-degree", || {
            let mut worst_euler = 0.0f64;
            let mut worst_degree = 0.0f64;
            for loss in invariant_losses() {
                let mut r = rng(6);
                let samples: Vec<Vec<f64>> = (0..20).map(|_| loss.random_unit_point(&mut r)).collect();
                let f = sampled_eval(loss.as_ref(), 9);
                let h = check_homogeneity(&f, &samples, 0.0, &[1e-3, 1e3], 1e-8)?;
                let g = check_gradient_degree(&f, &samples, 0.0, &[1e-3, 1e3], 1e-8)?;
                worst_euler = worst_euler.max(h.euler_residual.unwrap_or(f64::NAN));
                worst_degree = worst_degree.max(g.gradient_degree_residual.unwrap_or(f64::NAN));
            }
            // product logistic: ⟨∇L, x⟩ = 2k·L̃′(X)·X since X = ∏x is 2k-homogeneous
            let data = [(1.0, 1.0), (1.0, 1.0), (1.0, -1.0)];
            let mut worst_product = 0.0f64;
            let mut r = rng(7);
            for k in [2usize, 3] {
                for _ in 0..20 {
                    let x = away_from_zero(&mut r, 2 * k);
                    let e = product_logistic_loss(&data, k, &x)?;
                    let big_x: f64 = x.iter().product();
                    let dl = scalar_logistic(&data, big_x).1;
                    let want = 2.0 * k as f64 * dl * big_x;
                    worst_product = worst_product.max((dot(&e.grad, &x) - want).abs() / want.abs().max(1e-12));
                }
            }
            let ok = worst_euler <= 1e-8 && worst_degree <= 1e-8 && worst_product <= 1e-10;
            Ok((
                ok,
                format!(
                    "euler {worst_euler:.3e}, gradient degree −1 {worst_degree:.3e} (limit 1e-8); product logistic {worst_product:.3e} (limit 1e-10)"
                ),
            ))
        }),
        check("analytic-gradients-match-finite-differences", || {
            let mut all: Vec<Box<dyn StochasticLoss>> = invariant_losses();
            all.push(Box::new(ProductLogistic {
                data: vec![(1.0, 1.0), (1.0, 1.0), (1.0, -1.0)],
                k: 2,
            }));
            all.push(Box::new(MatFac::new(
                Tensor::new(vec![3, 2], vec![1.0, -0.5, 0.3, 2.0, 0.0, 1.0])?,
                2,
            )?));
            let mut worst = 0.0f64;
            for loss in &all {
                let mut r = rng(8);
                for i in 0..10 {
                    let x = loss.random_unit_point(&mut r);
                    let f = sampled_eval(loss.as_ref(), i);
                    let g = f(&x)?.grad;
                    let n = numeric_grad(|v| Ok(f(v)?.loss), &x, FD_H)?;
                    worst = worst.max(rel_error(&g, &n, 1e-8));
                }
            }
            Ok(bounded("worst rel err", worst, FD_TOL))
        }),
    ]
}

// ---------------------------------------------------------------- optimizers

/// Worst relative residual of `‖x(t+1)‖² = (1−ηλ)²‖x(t)‖² + η²n_t²` over a trajectory.
pub fn norm_recursion_residual(traj: &Trajectory, group: usize) -> f64 {
    let norms = traj.norms(group);
    let mut worst = 0.0f64;
    for (t, rec) in traj.records.iter().enumerate() {
        let cfg = traj.config.at_step(rec.step);
        let g = &rec.groups[group];
        let decay = 1.0 - cfg.eta * cfg.lambda;
        let want = decay * decay * g.norm * g.norm + cfg.eta * cfg.eta * g.n_t * g.n_t;
        let got = norms[t + 1] * norms[t + 1];
        worst = worst.max((got - want).abs() / want);
    }
    worst
}

/// Rayleigh noise with occasional 50× spikes: the heavy-tailed test family.
pub fn spiky_rayleigh() -> StochasticRayleigh {
    StochasticRayleigh::new(Tensor::diag(&[1.0, 2.0, 3.0, 4.0]), 0.5)
        .and_then(|l| l.with_spikes(0.02, 50.0))
        .expect("valid spiky family")
}

pub const SPIKE_ETA: f64 = 0.05;
pub const SPIKE_LAMBDA: f64 = 0.05;
/// `√C = 2`.
pub const SPIKE_CLIP: f64 = 4.0;
pub const SPIKE_STEPS: usize = 4000;
pub const SPIKE_WARMUP: usize = 1000;

/// Post-warmup `max |R_t − median R_t|` without and with clipping on the spiky family.
pub fn spike_deviations(seed: u64) -> Result<(f64, f64)> {
    let loss = spiky_rayleigh();
    let x0 = loss.random_unit_point(&mut rng(seed));
    let plain = OptimizerConfig::new(SPIKE_ETA, SPIKE_LAMBDA);
    let clipped = plain.clone().with_clip(SPIKE_CLIP);
    let dev = |cfg: &OptimizerConfig| -> Result<f64> {
        let traj = run_training(&loss, groups_from_flat(&loss, &x0)?, cfg, SPIKE_STEPS, seed)?;
        if let Some(f) = &traj.failure {
            return Err(Error::Input(f.clone()));
        }
        max_r_deviation(&traj, 0, SPIKE_WARMUP).ok_or_else(|| Error::Input("no post-warmup steps".into()))
    };
    Ok((dev(&plain)?, dev(&clipped)?))
}

/// Band-violation rate after `T₁` on stochastic rayleigh for one seed, with the
/// noise-condition status.
pub fn band_violation(seed: u64) -> Result<(f64, bounds::NoiseCondition)> {
    let loss = StochasticRayleigh::new(Tensor::diag(&[1.0, 2.0, 3.0, 4.0]), 0.5)?;
    let (eta, lambda) = (0.05, 0.01);
    let profile = profile_loss(&loss, 64, 64, 1000 + seed)?.envelope();
    let x0 = scaled(&loss.random_unit_point(&mut rng(seed)), 3.0);
    let x0_sq = norm(&x0).powi(2);
    let t1 = (bounds::T1_MARGIN * bounds::t1(eta, lambda, profile.m_max, profile.sigma_hi_sq, x0_sq)).ceil() as usize;
    let steps = t1 + 4000;
    let cfg = OptimizerConfig::new(eta, lambda);
    let traj = run_training(&loss, groups_from_flat(&loss, &x0)?, &cfg, steps, seed)?;
    let norms = traj.norms(0);
    let rate = bounds::band_violation_rate(&norms[t1..], eta, lambda, profile.sigma_lo_sq, profile.sigma_hi_sq);
    Ok((rate, bounds::noise_condition(eta, lambda, profile.sigma_lo_sq, profile.m_max, steps, 0.1)))
}

fn optimizer_checks() -> Vec<Check> {
    vec![
        check("norm-recursion-identity", || {
            let mut worst = 0.0f64;
            for (i, loss) in invariant_losses().iter().enumerate() {
                let x0 = scaled(&loss.random_unit_point(&mut rng(i as u64)), 2.0);
                for cfg in [
                    OptimizerConfig::new(0.05, 0.1),
                    OptimizerConfig::new(0.05, 0.1).with_clip(2.0),
                ] {
                    let traj = run_training(loss.as_ref(), groups_from_flat(loss.as_ref(), &x0)?, &cfg, 300, 3)?;
                    for g in 0..loss.groups().len() {
                        worst = worst.max(norm_recursion_residual(&traj, g));
                    }
                }
            }
            Ok(bounded("worst rel residual", worst, 1e-10))
        }),
        check("loss-rescaling-gives-identical-iterates", || {
            let mut worst = 0.0f64;
            for (i, loss) in invariant_losses().iter().enumerate() {
                let x0 = loss.random_unit_point(&mut rng(20 + i as u64));
                for c in [1e-3, 1e3] {
                    for cfg in [
                        OptimizerConfig::new(0.05, 0.1),
                        OptimizerConfig::new(0.05, 0.1).with_clip(2.0),
                    ] {
                        let d = check_equivalent_scaling(loss.as_ref(), &cfg, &x0, c, 100, ScalingMode::LossRescale, 4)?;
                        worst = worst.max(if d.truncated_at.is_some() { f64::INFINITY } else { d.max });
                    }
                }
            }
            Ok(bounded("worst ‖x_a − x_b‖/‖x_a‖", worst, 1e-12))
        }),
        check("clip-trigger-soundness", || {
            let loss = spiky_rayleigh();
            let x0 = loss.random_unit_point(&mut rng(2));
            let cfg = OptimizerConfig::new(SPIKE_ETA, SPIKE_LAMBDA).with_clip(SPIKE_CLIP);
            let traj = run_training(&loss, groups_from_flat(&loss, &x0)?, &cfg, 2000, 5)?;
            let ratio = (2.0 * SPIKE_CLIP * SPIKE_LAMBDA / SPIKE_ETA).sqrt();
            let mut mismatches = 0;
            let mut triggered = 0;
            let mut cap_err = 0.0f64;
            for r in &traj.records {
                let g = &r.groups[0];
                let cap = ratio * g.norm;
                let selects_cap = g.grad_norm > cap;
                triggered += usize::from(g.clip_triggered);
                if selects_cap != g.clip_triggered {
                    mismatches += 1;
                }
                let want = g.grad_norm.min(cap);
                cap_err = cap_err.max((g.n_t - want).abs() / want.max(1e-300));
            }
            let ok = mismatches == 0 && cap_err <= 1e-12 && triggered > 0;
            Ok((
                ok,
                format!("{mismatches} mismatches, {triggered} clipped steps, applied-norm err {cap_err:.1e}"),
            ))
        }),
        check("sgd-wd-norm-band-after-t1", || {
            let mut worst = 0.0f64;
            let mut condition = String::new();
            for seed in 0..10 {
                let (rate, nc) = band_violation(seed)?;
                worst = worst.max(rate);
                if seed == 0 {
                    condition = format!(
                        "noise condition {} ({:.3} vs {:.3})",
                        if nc.holds { "holds" } else { "does not hold" },
                        nc.lhs,
                        nc.rhs
                    );
                }
            }
            let (ok, msg) = bounded("worst violation rate over 10 seeds", worst, 0.05);
            Ok((ok, format!("{msg}; {condition}")))
        }),
        check("clipping-shrinks-norm-spikes", || {
            let mut losses = 0;
            let mut worst_ratio = 0.0f64;
            for seed in 0..10 {
                let (plain, clipped) = spike_deviations(seed)?;
                worst_ratio = worst_ratio.max(clipped / plain);
                if !(clipped < plain) {
                    losses += 1;
                }
            }
            Ok((
                losses == 0,
                format!("clipped < unclipped on {}/10 seeds, worst ratio {worst_ratio:.3}", 10 - losses),
            ))
        }),
    ]
}

// ---------------------------------------------------------------- homogeneity

fn homogeneity_checks() -> Vec<Check> {
    vec![
        check("checkers-are-deterministic", || {
            let loss = spiky_rayleigh();
            let a = estimate_rho(&loss, 16, 50, 9)?;
            let b = estimate_rho(&loss, 16, 50, 9)?;
            let x0 = loss.random_unit_point(&mut rng(1));
            let cfg = OptimizerConfig::new(0.05, 0.1);
            let s1 = check_equivalent_scaling(&loss, &cfg, &x0, 10.0, 50, ScalingMode::InitRescale, 3)?;
            let s2 = check_equivalent_scaling(&loss, &cfg, &x0, 10.0, 50, ScalingMode::InitRescale, 3)?;
            let f = sampled_eval(&loss, 2);
            let samples = vec![x0.clone()];
            let h1 = check_homogeneity(&f, &samples, 0.0, &[0.1, 10.0], 1e-8)?;
            let h2 = check_homogeneity(&f, &samples, 0.0, &[0.1, 10.0], 1e-8)?;
            Ok((a == b && s1 == s2 && h1 == h2, "rho, scaling and homogeneity reports repeat exactly".into()))
        }),
        check("unit-scale-is-exact", || {
            let mut worst = 0.0f64;
            for loss in invariant_losses() {
                let samples: Vec<Vec<f64>> = (0..5).map(|i| loss.random_unit_point(&mut rng(i))).collect();
                for k in [0.0, 1.0, 2.0] {
                    let f = sampled_eval(loss.as_ref(), 0);
                    let h = check_homogeneity(&f, &samples, k, &[1.0], 1e-12)?;
                    worst = worst.max(h.scaling_residual.unwrap_or(f64::NAN));
                }
            }
            Ok((worst == 0.0, format!("scaling residual at c = 1: {worst:e}")))
        }),
        check("homogeneity-suite-implies-norm-recursion", || {
            let mut detail = Vec::new();
            let mut ok = true;
            for loss in invariant_losses() {
                let samples: Vec<Vec<f64>> = (0..10).map(|i| loss.random_unit_point(&mut rng(40 + i))).collect();
                let f = sampled_eval(loss.as_ref(), 1);
                let suite_ok = check_homogeneity(&f, &samples, 0.0, &[1e-2, 1e2], 1e-8)?.passed
                    && check_gradient_degree(&f, &samples, 0.0, &[1e-2, 1e2], 1e-8)?.passed;
                let x0 = samples[0].clone();
                let traj = run_training(
                    loss.as_ref(),
                    groups_from_flat(loss.as_ref(), &x0)?,
                    &OptimizerConfig::new(0.02, 0.2),
                    200,
                    8,
                )?;
                let res = (0..loss.groups().len()).map(|g| norm_recursion_residual(&traj, g)).fold(0.0, f64::max);
                ok &= suite_ok && res <= 1e-10;
                detail.push(format!("{} {res:.1e}", loss.name()));
            }
            Ok((ok, format!("suite passes and recursion residuals: {}", detail.join(", "))))
        }),
        check("rho-of-diag-1-0", || {
            // spectral radius of the sphere Hessian for diag(1, 0) is 2; the estimate is widened by 10%
            let loss = Rayleigh::new(Tensor::diag(&[1.0, 0.0]))?;
            let est = estimate_rho(&loss, 64, 100, 3)?;
            let ok = (est.raw_max - 2.0).abs() <= 0.05 && est.rho >= est.raw_max;
            Ok((ok, format!("raw {:.4}, widened {:.4}", est.raw_max, est.rho)))
        }),
    ]
}

// ---------------------------------------------------------------- clipstats

pub const FIXTURES: [(&str, &str, Classification); 4] = [
    ("two_roots", include_str!("../../fixtures/two_roots.csv"), Classification::TwoRoots),
    ("interval", include_str!("../../fixtures/interval.csv"), Classification::Interval),
    ("zero_only", include_str!("../../fixtures/zero_only.csv"), Classification::ZeroOnly),
    ("heavy_tail", include_str!("../../fixtures/heavy_tail.csv"), Classification::TwoRoots),
];

/// Clip factor the fixtures are written for.
pub const FIXTURE_C: f64 = 4.0;

/// Random discrete distribution with 1–8 atoms, sometimes with mass at zero.
pub fn random_dist(r: &mut ChaCha8Rng) -> EmpiricalDist {
    let n = r.gen_range(1..=8);
    let mut atoms: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..10.0)).collect();
    if r.gen_bool(0.3) {
        atoms[0] = 0.0;
    }
    let weights: Vec<f64> = (0..n).map(|_| r.gen_range(0.05..1.0)).collect();
    EmpiricalDist::normalized(atoms, weights).expect("valid random distribution")
}

/// Classifies the root set of `G` on `(0, mean]` from its signs on a grid alone; every
/// positive root is at most the mean. `None` if the sign pattern fits no class.
pub fn classify_by_grid(p: &EmpiricalDist, c: f64, step: f64) -> Option<Classification> {
    let top = p.mean() * 1.01 + 2.0 * step;
    let n = (top / step).ceil() as usize;
    let tol = 1e-12 * p.mean().max(1.0);
    // phases: 0 = leading zeros, 1 = positive, 2 = negative after a crossing
    let (mut zeros, mut positives, mut negatives, mut returns) = (0usize, 0usize, 0usize, 0usize);
    for i in 1..=n {
        let g = g_clipped(p, c, i as f64 * step);
        if g.abs() <= tol {
            if positives == 0 && negatives == 0 {
                zeros += 1;
            }
        } else if g > 0.0 {
            if negatives > 0 {
                returns += 1;
            }
            positives += 1;
        } else {
            negatives += 1;
        }
    }
    match (zeros, positives, negatives, returns) {
        (0, p, n, 0) if p > 0 && n > 0 => Some(Classification::TwoRoots),
        (z, 0, n, 0) if z > 0 && n > 0 => Some(Classification::Interval),
        (0, 0, n, 0) if n > 0 => Some(Classification::ZeroOnly),
        _ => None,
    }
}

fn clipstats_checks() -> Vec<Check> {
    let mut checks: Vec<Check> = FIXTURES
        .iter()
        .map(|&(name, text, class)| {
            check(name, move || {
                let p = parse_dist_csv(text)?;
                let r = clipped_mean(&p, FIXTURE_C)?;
                let m = inv_c_median(&p, FIXTURE_C)?;
                let g = verify_g_properties(&p, FIXTURE_C, 4000)?;
                let fixed = f_clipped(&p, FIXTURE_C, 0.0) == 0.0;
                let sandwich = m / FIXTURE_C <= r.mu_c * (1.0 + 1e-12) && r.mu_c <= p.mean() * (1.0 + 1e-12);
                let ok = r.classification == class && g.passed && fixed && sandwich;
                Ok((
                    ok,
                    format!(
                        "μ = {:.6} in [M/C = {:.6}, mean = {:.6}], {:?}, G concave {} argmax {} sandwich {}",
                        r.mu_c,
                        m / FIXTURE_C,
                        p.mean(),
                        r.classification,
                        g.concave,
                        g.argmax_ok,
                        g.sandwich_ok
                    ),
                ))
            })
        })
        .collect();
    checks.push(check("sandwich-on-1000-random-distributions", || {
        let mut r = rng(11);
        let mut bad = 0;
        for _ in 0..1000 {
            let p = random_dist(&mut r);
            let c = r.gen_range(1.1..10.0);
            let mu = clipped_mean(&p, c)?.mu_c;
            let m = inv_c_median(&p, c)?;
            let zero_fixed = f_clipped(&p, c, 0.0) == 0.0;
            if !(zero_fixed && mu <= p.mean() * (1.0 + 1e-12) && m / c <= mu * (1.0 + 1e-12) + 1e-15) {
                bad += 1;
            }
        }
        Ok((bad == 0, format!("{bad} of 1000 violate 0 fixed, M/C ≤ μ ≤ mean")))
    }));
    checks.push(check("classification-matches-root-scan", || {
        let mut r = rng(12);
        let mut bad = 0;
        let mut total = 0;
        for class in [Classification::TwoRoots, Classification::Interval, Classification::ZeroOnly] {
            for _ in 0..100 {
                // C = 4 so the boundary mass 3/4 is exact in binary
                let c = 4.0;
                let n = r.gen_range(1..=6);
                let atoms: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..10.0)).collect();
                let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                let zero = match class {
                    Classification::TwoRoots => r.gen_range(0.0..0.7),
                    Classification::Interval => 0.75,
                    Classification::ZeroOnly => r.gen_range(0.8..0.99),
                };
                let mut a = vec![0.0];
                let mut w = vec![zero];
                a.extend(&atoms);
                w.extend(raw.iter().map(|x| x / s * (1.0 - zero)));
                let w_total: f64 = w.iter().sum();
                // keep the zero mass exact; absorb rounding in the last atom
                let last = w.len() - 1;
                w[last] += 1.0 - w_total;
                let p = match EmpiricalDist::new(a, w) {
                    Ok(p) => p,
                    Err(_) => continue,
                };
                total += 1;
                let got = clipped_mean(&p, c)?.classification;
                if classify_by_grid(&p, c, 1e-6) != Some(got) || got != class {
                    bad += 1;
                }
            }
        }
        Ok((bad == 0 && total >= 290, format!("{bad} of {total} disagree with the grid scan")))
    }));
    checks.push(check("clipped-mean-nondecreasing-in-c", || {
        let mut r = rng(13);
        let mut bad = 0;
        for _ in 0..200 {
            let p = random_dist(&mut r);
            let mut prev = 0.0;
            for c in [1.2, 1.5, 2.0, 3.0, 4.0, 8.0, 16.0, 64.0] {
                let mu = clipped_mean(&p, c)?.mu_c;
                if mu < prev * (1.0 - 1e-12) {
                    bad += 1;
                }
                prev = mu;
            }
        }
        Ok((bad == 0, format!("{bad} decreases over 200 distributions × 8 values of C")))
    }));
    checks.push(check("report-on-fixture", || {
        let rep = cmd_clipstats(FIXTURES[3].1, FIXTURE_C, Default::default())?;
        Ok((
            rep.g_properties.passed && rep.n_atoms == 7,
            format!("heavy_tail μ = {:.6}, α bound {:?}", rep.mu_c, rep.alpha_c_bound),
        ))
    }));
    checks
}

// ---------------------------------------------------------------- sinet

fn small_sinet(attention: AttentionKind) -> SinetConfig {
    SinetConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_k: 4,
        d_v: 4,
        d_ff: 16,
        vocab_size: 12,
        max_seq_len: 6,
        head_enabled: true,
        attention,
    }
}

const SINET_TOKENS: [usize; 6] = [3, 1, 4, 1, 5, 9];

fn sinet_checks() -> Vec<Check> {
    vec![
        check("logits-invariant-to-encoder-scale", || {
            let model = init_model(&small_sinet(AttentionKind::ScaleInvariant), 1.0, 2)?;
            let base = model.forward(&SINET_TOKENS)?;
            let mut worst = 0.0f64;
            for c in [1e-2, 1e2] {
                let out = model.scaled_encoder(c).forward(&SINET_TOKENS)?;
                worst = worst.max(rel_error(out.data(), base.data(), 1e-300));
            }
            Ok(bounded("worst rel err", worst, 1e-6))
        }),
        check("degree-audit", || {
            let model = init_model(&small_sinet(AttentionKind::ScaleInvariant), 1.0, 8)?;
            let audit = degree_audit(&model, &SINET_TOKENS, &[1e-2, 1e2], 1e-6)?;
            let failed: Vec<&str> = audit.failures().iter().map(|l| l.name.as_str()).collect();
            Ok((
                audit.passed,
                format!(
                    "{} intermediates, names match {}, residual rule {}, failures {failed:?}",
                    audit.lines.len(),
                    audit.names_match,
                    audit.residual_rule_ok
                ),
            ))
        }),
        Check {
            name: "softmax-attention-degree-audit",
            negative_control: true,
            run: Box::new(|| {
                let model = init_model(&small_sinet(AttentionKind::Softmax), 1.0, 8)?;
                let audit = degree_audit(&model, &SINET_TOKENS, &[1e-2, 1e2], 1e-6)?;
                let failed: Vec<&str> = audit.failures().iter().map(|l| l.name.as_str()).collect();
                Ok((audit.passed, format!("{} intermediates fail, first {:?}", failed.len(), failed.first())))
            }),
        },
        check("encoder-training-norm-recursion", || {
            let cfg = small_sinet(AttentionKind::ScaleInvariant);
            let task = MaskedTokenTask::new(cfg.clone(), 6, 0.3, 4, 3)?;
            let m = init_model(&cfg, 1.0, 3)?;
            let opt = OptimizerConfig::new(0.01, 0.5).with_plain_eta(0.05);
            let traj = run_training(&task, vec![m.encoder, m.head], &opt, 30, 3)?;
            let ok_run = traj.failure.is_none();
            Ok((
                ok_run && norm_recursion_residual(&traj, 0) <= 1e-10,
                format!("encoder residual {:.2e} over 30 steps", norm_recursion_residual(&traj, 0)),
            ))
        }),
    ]
}

// ---------------------------------------------------------------- harness

static SCRATCH: AtomicUsize = AtomicUsize::new(0);

/// Fresh directory under the system temp dir; removed by [`ScratchDir`]'s drop.
struct ScratchDir(PathBuf);

impl ScratchDir {
    fn new() -> Result<Self> {
        let n = SCRATCH.fetch_add(1, Ordering::Relaxed);
        let p = std::env::temp_dir().join(format!("silab-verify-{}-{n}", std::process::id()));
        let _ = std::fs::remove_dir_all(&p);
        std::fs::create_dir_all(&p)?;
        Ok(ScratchDir(p))
    }
}

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn same_bytes(a: &std::path::Path, b: &std::path::Path, files: &[&str]) -> Result<bool> {
    for f in files {
        if std::fs::read(a.join(f))? != std::fs::read(b.join(f))? {
            return Ok(false);
        }
    }
    Ok(true)
}

pub const EXAMPLE_CONFIGS: [&str; 4] = [
    "loss = angle\neta = 0.01\nlambda = 0.1\nsteps = 500\nseed = 4\n",
    "loss = stoch-rayleigh\nspectrum = 1,2,3\nnoise_scale = 0.3\neta = 0.05\nlambda = 0.05\nclip = 4\nsteps = 400\nseed = 2\ninit_scales = 0.5,2\n",
    "loss = multigroup\nspectrum = 1,2\nspectrum_b = 3,1,2\neta = 0.05\nlambda = 0.1\nsteps = 100\n",
    "loss = sinet\nd_model = 8\nn_heads = 2\nd_k = 4\nd_v = 4\nd_ff = 16\nvocab = 12\nseq_len = 6\nbatch = 2\neta = 0.01\nlambda = 0.5\nplain_eta = 0.05\nsteps = 10\n",
];

fn harness_checks() -> Vec<Check> {
    vec![
        check("config-canonical-round-trip", || {
            let mut ok = true;
            for text in EXAMPLE_CONFIGS {
                let c = ExperimentConfig::parse(text)?;
                let canon = c.to_text();
                let again = ExperimentConfig::parse(&canon)?;
                ok &= again == c && again.to_text() == canon;
            }
            Ok((ok, format!("{} configs", EXAMPLE_CONFIGS.len())))
        }),
        check("train-is-byte-reproducible", || {
            let mut ok = true;
            for text in EXAMPLE_CONFIGS {
                let cfg = ExperimentConfig::parse(text)?;
                let (a, b) = (ScratchDir::new()?, ScratchDir::new()?);
                train_into(&cfg, &a.0)?;
                train_into(&cfg, &b.0)?;
                ok &= same_bytes(&a.0, &b.0, &["trajectory.csv", "summary.json", "config.txt"])?;
            }
            Ok((ok, "trajectory.csv, summary.json, config.txt identical across reruns".into()))
        }),
        check("sweep-is-byte-reproducible", || {
            let cfg = ExperimentConfig::parse(EXAMPLE_CONFIGS[1])?;
            let (a, b) = (ScratchDir::new()?, ScratchDir::new()?);
            let ra = sweep_into(&cfg, &[0.5, 2.0], &a.0)?;
            sweep_into(&cfg, &[0.5, 2.0], &b.0)?;
            let ok = same_bytes(&a.0, &b.0, &["sweep.json", "curves.csv", "sgd-wd-clip-scale0.5/trajectory.csv"])?
                && ra.runs.len() == 6;
            Ok((ok, "sweep.json, curves.csv and per-run files identical across reruns".into()))
        }),
    ]
}
