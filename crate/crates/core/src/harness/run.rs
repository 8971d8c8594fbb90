//! Training runs, init-scale sweeps and clipped-mean reports, with their on-disk artifacts.
//!
//! Everything written next to `run.log` is a pure function of config and seed; wall time
//! and timestamps go only into `run.log`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LossSpec};
use crate::bounds::{self, NoiseCondition};
use crate::clipstats::{
    clipped_mean_with, empirical_grad_dist, verify_g_properties, Classification, Convention, EmpiricalDist,
    GPropertiesReport,
};
use crate::error::{Error, Result};
use crate::losses::{profile_loss, LossProfile, StochasticLoss};
use crate::optim::{run_training, OptimizerConfig, Trajectory};

/// Overrides the config's `out_dir`.
pub const OUT_DIR_ENV: &str = "SILAB_OUT_DIR";

/// Clip factor for the clipped sweep variant when the config sets none.
pub const DEFAULT_SWEEP_CLIP: f64 = 4.0;

/// Failure probability used when logging the noise condition.
pub const NOISE_CONDITION_DELTA: f64 = 0.1;

/// A run whose final loss is above this fraction of its initial loss made no real progress.
pub const STALL_FRACTION: f64 = 0.9;

/// Required final-loss ratio of SGD without WD over SGD+WD at the largest init scale.
pub const NO_WD_RATIO: f64 = 2.0;

const PROFILE_POINTS: usize = 32;
const PROFILE_SAMPLES: usize = 32;
const CLIP_PROFILE_POINTS: usize = 8;
const CLIP_PROFILE_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    SgdWd,
    SgdWdClip,
    SgdNoWd,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SgdWd, Variant::SgdWdClip, Variant::SgdNoWd];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SgdWd => "sgd-wd",
            Variant::SgdWdClip => "sgd-wd-clip",
            Variant::SgdNoWd => "sgd-no-wd",
        }
    }

    /// The variant a config's own optimizer settings describe.
    pub fn of(cfg: &OptimizerConfig) -> Variant {
        if cfg.clip_factor.is_some() {
            Variant::SgdWdClip
        } else if cfg.lambda == 0.0 {
            Variant::SgdNoWd
        } else {
            Variant::SgdWd
        }
    }

    /// Derives this variant's optimizer from a sweep's base settings.
    pub fn apply(self, base: &OptimizerConfig) -> OptimizerConfig {
        match self {
            Variant::SgdWd => OptimizerConfig {
                clip_factor: None,
                ..base.clone()
            },
            Variant::SgdWdClip => OptimizerConfig {
                clip_factor: Some(base.clip_factor.unwrap_or(DEFAULT_SWEEP_CLIP)),
                ..base.clone()
            },
            Variant::SgdNoWd => OptimizerConfig {
                lambda: 0.0,
                clip_factor: None,
                ..base.clone()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupNorm {
    pub group: String,
    pub norm: f64,
}

/// Horizons and band statistics evaluated on constants profiled from the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSummary {
    /// Widened envelope of the sampled constants.
    pub profile: LossProfile,
    pub t0: usize,
    pub t1: f64,
    /// Only for clipped runs.
    pub t_prime: Option<f64>,
    /// Fraction of steps after `T1_MARGIN·T₁` outside the norm band; `None` if the run ended first.
    pub band_violation_rate: Option<f64>,
    pub noise_condition: NoiseCondition,
}

/// Measured and predicted stationary `‖x‖²` for the constant-gradient angle family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSummary {
    /// Mean `‖x(t)‖²` over the second half of the run.
    pub measured_norm_sq: f64,
    /// Fixed point of the exact norm recursion, `σ√(η/(λ(2−ηλ)))`.
    pub recursion_fixed_point: f64,
    /// `√(2η/(λ(2−ηλ)))·σ`, the commonly quoted form; it exceeds the fixed point by `√2`.
    pub quoted_closed_form: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub loss: String,
    pub variant: Variant,
    pub init_scale: f64,
    pub seed: u64,
    pub steps_requested: usize,
    pub steps_completed: usize,
    /// Mean sampled loss over the last tenth of the run.
    pub final_loss: f64,
    /// Averaged loss at the final parameters.
    pub final_eval_loss: Option<f64>,
    /// Mean sampled loss over the first tenth of the run.
    pub initial_loss: f64,
    pub diverged: bool,
    pub failure: Option<String>,
    /// Smallest `‖∇L(x̄)‖` seen, combining scale-invariant groups.
    pub min_sphere_grad_norm: Option<f64>,
    /// Fraction of scale-invariant group updates that were clipped; only with clipping on.
    pub clip_frequency: Option<f64>,
    pub final_norms: Vec<GroupNorm>,
    pub bounds: Option<BoundsSummary>,
    pub equilibrium: Option<EquilibriumSummary>,
}

impl RunSummary {
    /// No meaningful progress: diverged, or final loss above `STALL_FRACTION` of the start.
    pub fn stalled(&self) -> bool {
        self.diverged || self.final_loss > STALL_FRACTION * self.initial_loss
    }
}

fn window_mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs one training job and summarizes it. `scale` multiplies the starting point.
pub fn run_one(cfg: &ExperimentConfig, opt: &OptimizerConfig, scale: f64) -> Result<(Trajectory, RunSummary)> {
    let loss = cfg.build_loss()?;
    let groups = cfg.initial_groups(loss.as_ref(), scale)?;
    let x0_norm_sq: f64 = groups.iter().filter(|g| g.scale_invariant).map(|g| g.norm().powi(2)).sum();
    let traj = run_training(loss.as_ref(), groups, opt, cfg.steps, cfg.seed)?;
    let summary = summarize(cfg, loss.as_ref(), opt, scale, x0_norm_sq, &traj)?;
    Ok((traj, summary))
}

fn summarize(
    cfg: &ExperimentConfig,
    loss: &dyn StochasticLoss,
    opt: &OptimizerConfig,
    scale: f64,
    x0_norm_sq: f64,
    traj: &Trajectory,
) -> Result<RunSummary> {
    let invariant: Vec<bool> = loss.groups().iter().map(|g| g.scale_invariant).collect();
    let n = traj.records.len();
    let w = (n / 10).max(1).min(n);
    let losses = traj.losses();

    let min_sphere_grad_norm = invariant.iter().any(|&b| b).then(|| {
        traj.records
            .iter()
            .map(|r| {
                r.groups
                    .iter()
                    .zip(&invariant)
                    .filter(|(_, &inv)| inv)
                    .map(|(g, _)| (g.grad_norm * g.norm).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    });

    let clip_frequency = opt.clip_factor.map(|_| {
        let (mut hits, mut total) = (0usize, 0usize);
        for r in &traj.records {
            for (g, _) in r.groups.iter().zip(&invariant).filter(|(_, &inv)| inv) {
                total += 1;
                hits += usize::from(g.clip_triggered);
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    });

    let final_flat: Vec<f64> = traj.final_groups.iter().flat_map(|g| g.flat()).collect();
    let final_eval_loss = if traj.diverged() {
        None
    } else {
        loss.mean_eval(&final_flat).ok().map(|e| e.loss).filter(|l| l.is_finite())
    };

    let bounds = bounds_summary(cfg, loss, opt, x0_norm_sq, traj)?;

    let equilibrium = match (&cfg.loss, n) {
        (LossSpec::Angle { sigma }, 2..) if opt.lambda > 0.0 => {
            let tail: Vec<f64> = traj.records[n / 2..].iter().map(|r| r.groups[0].norm.powi(2)).collect();
            let el = opt.eta * opt.lambda;
            Some(EquilibriumSummary {
                measured_norm_sq: window_mean(&tail),
                recursion_fixed_point: bounds::equilibrium_norm_sq(opt.eta, opt.lambda, *sigma),
                quoted_closed_form: (2.0 * opt.eta / (opt.lambda * (2.0 - el))).sqrt() * sigma,
            })
        }
        _ => None,
    };

    Ok(RunSummary {
        loss: cfg.loss.id().to_string(),
        variant: Variant::of(opt),
        init_scale: scale,
        seed: cfg.seed,
        steps_requested: cfg.steps,
        steps_completed: n,
        final_loss: traj.final_loss(),
        final_eval_loss,
        initial_loss: window_mean(&losses[..w]),
        diverged: traj.diverged(),
        failure: traj.failure.clone(),
        min_sphere_grad_norm,
        clip_frequency,
        final_norms: traj
            .final_groups
            .iter()
            .map(|g| GroupNorm {
                group: g.name.clone(),
                norm: g.norm(),
            })
            .collect(),
        bounds,
        equilibrium,
    })
}

/// Profiles the loss and evaluates the horizons. Only for fully scale-invariant losses
/// trained with weight decay; sinet is skipped because profiling it is too slow to be routine.
fn bounds_summary(
    cfg: &ExperimentConfig,
    loss: &dyn StochasticLoss,
    opt: &OptimizerConfig,
    x0_norm_sq: f64,
    traj: &Trajectory,
) -> Result<Option<BoundsSummary>> {
    if !loss.is_scale_invariant() || opt.lambda <= 0.0 || matches!(cfg.loss, LossSpec::Sinet(_)) {
        return Ok(None);
    }
    let (eta, lambda) = (opt.eta, opt.lambda);
    let profile = profile_loss(loss, PROFILE_POINTS, PROFILE_SAMPLES, cfg.seed)?.envelope();
    let t0 = bounds::t0(eta, lambda, x0_norm_sq, profile.rho);
    let t1 = bounds::t1(eta, lambda, profile.m_max, profile.sigma_hi_sq, x0_norm_sq);
    let band_violation_rate = (loss.groups().len() == 1).then(|| {
        let start = (bounds::T1_MARGIN * t1).ceil() as usize;
        let norms = traj.norms(0);
        (start < norms.len()).then(|| {
            bounds::band_violation_rate(&norms[start..], eta, lambda, profile.sigma_lo_sq, profile.sigma_hi_sq)
        })
    });
    let t_prime = match opt.clip_factor {
        None => None,
        Some(c) => clip_constants(loss, c, cfg.seed)?
            .map(|(alpha, mu_min, mu_max)| bounds::t_prime(eta, lambda, alpha, x0_norm_sq, mu_min, mu_max)),
    };
    Ok(Some(BoundsSummary {
        noise_condition: bounds::noise_condition(
            eta,
            lambda,
            profile.sigma_lo_sq,
            profile.m_max,
            cfg.steps,
            NOISE_CONDITION_DELTA,
        ),
        profile,
        t0,
        t1,
        t_prime,
        band_violation_rate: band_violation_rate.flatten(),
    }))
}

/// `(α_C, μ_min, μ_max)` over sampled sphere points; `None` if some clipped mean is zero.
fn clip_constants(loss: &dyn StochasticLoss, c: f64, seed: u64) -> Result<Option<(f64, f64, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc11b);
    let (mut alpha, mut lo, mut hi) = (f64::INFINITY, f64::INFINITY, 0.0f64);
    for i in 0..CLIP_PROFILE_POINTS {
        let x = loss.random_unit_point(&mut rng);
        let p = empirical_grad_dist(loss, &x, CLIP_PROFILE_SAMPLES, seed.wrapping_add(i as u64))?;
        let r = clipped_mean_with(&p, c, Convention::ClipAtCMu)?;
        let Some(a) = r.alpha_c_bound else {
            return Ok(None);
        };
        alpha = alpha.min(a);
        lo = lo.min(r.mu_c);
        hi = hi.max(r.mu_c);
    }
    Ok(Some((alpha, lo, hi)))
}

/// Largest post-warmup `|R_t − median R_t|` of a group; `None` if nothing is left after warmup.
pub fn max_r_deviation(traj: &Trajectory, group: usize, warmup: usize) -> Option<f64> {
    let mut r: Vec<f64> = traj.records.iter().skip(warmup).map(|rec| rec.groups[group].r_t).collect();
    if r.is_empty() {
        return None;
    }
    let vals = r.clone();
    r.sort_by(f64::total_cmp);
    let m = r.len();
    let median = if m % 2 == 1 {
        r[m / 2]
    } else {
        0.5 * (r[m / 2 - 1] + r[m / 2])
    };
    Some(vals.iter().map(|v| (v - median).abs()).fold(0.0, f64::max))
}

/// Output root: `$SILAB_OUT_DIR` if set, else the config's `out_dir`.
pub fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.out_dir.clone(),
    }
}

/// Writes via a sibling temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| Error::Io(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

fn write_sidecar(dir: &Path, started: Instant) -> Result<()> {
    let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let log = format!(
        "wall_time_s = {:.3}\nfinished_unix = {unix}\n",
        started.elapsed().as_secs_f64()
    );
    write_atomic(&dir.join("run.log"), log.as_bytes())
}

fn scale_tag(scale: f64) -> String {
    format!("scale{scale}")
}

fn write_run(dir: &Path, cfg_text: &str, traj: &Trajectory, summary: &RunSummary) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = Vec::new();
    traj.write_csv(&mut csv)?;
    write_atomic(&dir.join("trajectory.csv"), &csv)?;
    write_atomic(&dir.join("summary.json"), &to_json(summary)?)?;
    write_atomic(&dir.join("config.txt"), cfg_text.as_bytes())
}

/// Trains at the first init scale with the config's own optimizer and writes
/// `trajectory.csv`, `summary.json`, `config.txt` and `run.log` under
/// `<root>/train-<loss>-scale<s>/`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(RunSummary, PathBuf)> {
    let dir = output_root(cfg).join(format!("train-{}-{}", cfg.loss.id(), scale_tag(cfg.init_scales[0])));
    Ok((train_into(cfg, &dir)?, dir))
}

/// [`cmd_train`] with an explicit output directory.
pub fn train_into(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    let started = Instant::now();
    let (traj, summary) = run_one(cfg, &cfg.optimizer, cfg.init_scales[0])?;
    write_run(dir, &cfg.to_text(), &traj, &summary)?;
    write_sidecar(dir, started)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpread {
    pub variant: Variant,
    /// Final loss per scale, in scale order; `None` for diverged runs.
    pub final_losses: Vec<Option<f64>>,
    /// `max/min − 1` over the final losses; `None` if any run diverged.
    pub spread: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoWdComparison {
    pub init_scale: f64,
    pub wd_final_loss: f64,
    pub no_wd_final_loss: f64,
    pub ratio: f64,
    pub no_wd_stalled: bool,
    /// `ratio ≥ NO_WD_RATIO` or the no-WD run stalled or diverged.
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub loss: String,
    pub scales: Vec<f64>,
    /// Variant-major, then scale order.
    pub runs: Vec<RunSummary>,
    pub spreads: Vec<VariantSpread>,
    pub no_wd: NoWdComparison,
}

impl SweepReport {
    pub fn run(&self, variant: Variant, scale: f64) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.variant == variant && r.init_scale == scale)
    }

    pub fn spread(&self, variant: Variant) -> Option<f64> {
        self.spreads.iter().find(|s| s.variant == variant).and_then(|s| s.spread)
    }
}

/// `max/min − 1`; zero for a single value, `None` if any is missing or nonpositive.
pub fn spread(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().copied().collect::<Option<_>>()?;
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if v.is_empty() || !(lo > 0.0) {
        return None;
    }
    Some(hi / lo - 1.0)
}

/// Runs every scale under each [`Variant`] in parallel. Divergent runs are recorded and
/// the sweep carries on. Writes per-run artifacts plus `sweep.json` and `curves.csv`
/// under `<root>/sweep-<loss>/`.
pub fn cmd_sweep(cfg: &ExperimentConfig, scales: &[f64]) -> Result<(SweepReport, PathBuf)> {
    let root = output_root(cfg).join(format!("sweep-{}", cfg.loss.id()));
    Ok((sweep_into(cfg, scales, &root)?, root))
}

/// [`cmd_sweep`] with an explicit output directory.
pub fn sweep_into(cfg: &ExperimentConfig, scales: &[f64], root: &Path) -> Result<SweepReport> {
    let started = Instant::now();
    let (report, trajs) = sweep(cfg, scales)?;
    fs::create_dir_all(root)?;
    let cfg_text = cfg.to_text();
    for (summary, traj) in report.runs.iter().zip(&trajs) {
        let dir = root.join(format!("{}-{}", summary.variant.name(), scale_tag(summary.init_scale)));
        write_run(&dir, &cfg_text, traj, summary)?;
    }
    write_atomic(&root.join("sweep.json"), &to_json(&report)?)?;
    write_atomic(&root.join("curves.csv"), &curves_csv(&report, &trajs)?)?;
    write_sidecar(root, started)?;
    Ok(report)
}

/// The sweep without any file output.
pub fn sweep(cfg: &ExperimentConfig, scales: &[f64]) -> Result<(SweepReport, Vec<Trajectory>)> {
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Input("sweep needs at least one positive init scale".into()));
    }
    if cfg.optimizer.lambda <= 0.0 {
        return Err(Error::Input("sweep compares weight decay against none; set lambda > 0".into()));
    }
    let jobs: Vec<(Variant, f64)> =
        Variant::ALL.iter().flat_map(|&v| scales.iter().map(move |&s| (v, s))).collect();
    let results: Vec<(Trajectory, RunSummary)> = jobs
        .par_iter()
        .map(|&(v, s)| run_one(cfg, &v.apply(&cfg.optimizer), s))
        .collect::<Result<_>>()?;
    let (trajs, runs): (Vec<_>, Vec<_>) = results.into_iter().unzip();

    let spreads = Variant::ALL
        .iter()
        .map(|&v| {
            let finals: Vec<Option<f64>> = runs
                .iter()
                .filter(|r| r.variant == v)
                .map(|r| (!r.diverged).then_some(r.final_loss))
                .collect();
            VariantSpread {
                variant: v,
                spread: spread(&finals),
                final_losses: finals,
            }
        })
        .collect();

    let top = scales.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let find = |v: Variant| {
        runs.iter()
            .find(|r| r.variant == v && r.init_scale == top)
            .expect("every variant ran at every scale")
    };
    let (wd, no_wd) = (find(Variant::SgdWd), find(Variant::SgdNoWd));
    let ratio = no_wd.final_loss / wd.final_loss;
    let no_wd_stalled = no_wd.stalled();
    let no_wd = NoWdComparison {
        init_scale: top,
        wd_final_loss: wd.final_loss,
        no_wd_final_loss: no_wd.final_loss,
        ratio,
        no_wd_stalled,
        passed: ratio >= NO_WD_RATIO || no_wd_stalled,
    };

    Ok((
        SweepReport {
            loss: cfg.loss.id().to_string(),
            scales: scales.to_vec(),
            runs,
            spreads,
            no_wd,
        },
        trajs,
    ))
}

/// Loss and norm curves of every run, one row per (run, step, group).
fn curves_csv(report: &SweepReport, trajs: &[Trajectory]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["variant", "init_scale", "step", "loss", "group", "norm"]).map_err(io)?;
    for (summary, traj) in report.runs.iter().zip(trajs) {
        for r in &traj.records {
            for g in &r.groups {
                w.write_record([
                    summary.variant.name().to_string(),
                    summary.init_scale.to_string(),
                    r.step.to_string(),
                    r.loss.to_string(),
                    g.group.clone(),
                    g.norm.to_string(),
                ])
                .map_err(io)?;
            }
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipstatsReport {
    pub c: f64,
    pub convention: Convention,
    pub n_atoms: usize,
    pub mean: f64,
    pub mass_at_zero: f64,
    pub mu_c: f64,
    pub classification: Classification,
    pub m_inv_c: f64,
    pub alpha_c_bound: Option<f64>,
    pub g_properties: GPropertiesReport,
}

/// Grid resolution for the `G` property checks in clipstats reports.
pub const CLIPSTATS_GRID: usize = 2000;

/// Reads `value,weight` rows (optional header, weights rescaled to sum to 1).
pub fn parse_dist_csv(text: &str) -> Result<EmpiricalDist> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let (mut atoms, mut weights) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Input(format!("distribution csv: {e}")))?;
        if rec.len() != 2 {
            return Err(Error::Input(format!("row {}: expected `value,weight`", i + 1)));
        }
        let (a, w) = (rec[0].parse::<f64>(), rec[1].parse::<f64>());
        match (a, w) {
            (Ok(a), Ok(w)) => {
                atoms.push(a);
                weights.push(w);
            }
            _ if i == 0 => continue,
            _ => return Err(Error::Input(format!("row {}: `{}` is not numeric", i + 1, rec.as_slice()))),
        }
    }
    EmpiricalDist::normalized(atoms, weights)
}

pub fn cmd_clipstats(dist_csv: &str, c: f64, convention: Convention) -> Result<ClipstatsReport> {
    let p = parse_dist_csv(dist_csv)?;
    let r = clipped_mean_with(&p, c, convention)?;
    Ok(ClipstatsReport {
        c,
        convention,
        n_atoms: p.atoms().len(),
        mean: p.mean(),
        mass_at_zero: p.mass_at_zero(),
        mu_c: r.mu_c,
        classification: r.classification,
        m_inv_c: r.m_inv_c,
        alpha_c_bound: r.alpha_c_bound,
        g_properties: verify_g_properties(&p, c, CLIPSTATS_GRID)?,
    })
}

/// JSON text for any report.
pub fn report_json<T: Serialize>(v: &T) -> Result<String> {
    String::from_utf8(to_json(v)?).map_err(|e| Error::Io(e.to_string()))
}
