//! Gradient descent with weight decay, its stochastic variant, relative global clipping,
//! and a plain-SGD baseline, plus the training loop that logs norm dynamics.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::StochasticLoss;
use crate::tensor::Tensor;
use crate::vecmath::{all_finite, norm, norm_sq};

/// Hyperparameters shared by all update rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub lambda: f64,
    /// Clipping factor `C > 1`; `None` means no clipping (`C = ∞`).
    pub clip_factor: Option<f64>,
    /// Piecewise-constant LR multipliers `(from_step, multiplier)`, steps strictly increasing.
    pub schedule: Vec<(usize, f64)>,
    /// LR for groups that are not scale invariant; defaults to `eta`.
    pub plain_eta: Option<f64>,
    /// A group norm above this marks the run as diverged.
    pub divergence_norm: f64,
}

impl OptimizerConfig {
    pub fn new(eta: f64, lambda: f64) -> Self {
        OptimizerConfig {
            eta,
            lambda,
            clip_factor: None,
            schedule: Vec::new(),
            plain_eta: None,
            divergence_norm: 1e8,
        }
    }

    pub fn with_clip(mut self, c: f64) -> Self {
        self.clip_factor = Some(c);
        self
    }

    pub fn with_plain_eta(mut self, eta: f64) -> Self {
        self.plain_eta = Some(eta);
        self
    }

    pub fn with_schedule(mut self, schedule: Vec<(usize, f64)>) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::contract("OptimizerConfig", detail));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive and finite, got {}", self.eta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be ≥ 0, got {}", self.lambda));
        }
        if let Some(c) = self.clip_factor {
            if !(c > 1.0 && c.is_finite()) {
                return bad(format!("clip_factor must be > 1, got {c}"));
            }
            if self.lambda == 0.0 {
                return bad("clipping needs lambda > 0: the threshold is proportional to √λ".into());
            }
        }
        if let Some(p) = self.plain_eta {
            if !(p > 0.0 && p.is_finite()) {
                return bad(format!("plain_eta must be positive, got {p}"));
            }
        }
        if !(self.divergence_norm > 0.0) {
            return bad("divergence_norm must be positive".into());
        }
        let mut prev = None;
        for &(step, mult) in &self.schedule {
            if prev.is_some_and(|p| step <= p) {
                return bad("schedule steps must be strictly increasing".into());
            }
            if !(mult > 0.0 && mult.is_finite()) {
                return bad(format!("schedule multiplier must be positive, got {mult}"));
            }
            prev = Some(step);
        }
        let max_mult = self.schedule.iter().map(|s| s.1).fold(1.0, f64::max);
        if self.eta * max_mult * self.lambda >= 1.0 {
            return bad("eta·lambda must stay below 1 at every schedule stage".into());
        }
        Ok(())
    }

    pub fn eta_at(&self, step: usize) -> f64 {
        let mult = self
            .schedule
            .iter()
            .take_while(|(s, _)| *s <= step)
            .last()
            .map_or(1.0, |&(_, m)| m);
        self.eta * mult
    }

    /// Snapshot with the schedule applied to `eta` and `plain_eta`.
    pub fn at_step(&self, step: usize) -> OptimizerConfig {
        let ratio = self.eta_at(step) / self.eta;
        OptimizerConfig {
            eta: self.eta_at(step),
            plain_eta: self.plain_eta.map(|p| p * ratio),
            schedule: Vec::new(),
            ..self.clone()
        }
    }

    /// `√(2Cλ/η)`; multiply by `‖x‖` for the gradient-norm cap. Infinite without clipping.
    pub fn clip_ratio(&self) -> f64 {
        match self.clip_factor {
            Some(c) => (2.0 * c * self.lambda / self.eta).sqrt(),
            None => f64::INFINITY,
        }
    }
}

/// A named slice of the parameters with its invariance tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub tensors: Vec<Tensor>,
    pub scale_invariant: bool,
    pub group_index: usize,
}

impl ParamGroup {
    pub fn new(name: &str, tensors: Vec<Tensor>, scale_invariant: bool, group_index: usize) -> Self {
        ParamGroup {
            name: name.to_string(),
            tensors,
            scale_invariant,
            group_index,
        }
    }

    /// Single-vector group.
    pub fn from_vec(name: &str, x: Vec<f64>, scale_invariant: bool) -> Self {
        ParamGroup::new(name, vec![Tensor::vector(x)], scale_invariant, 0)
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Same tensor shapes, new values.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ParamGroup> {
        if flat.len() != self.len() {
            return Err(Error::dim(
                "ParamGroup::with_flat",
                format!("group `{}` has {} entries, got {}", self.name, self.len(), flat.len()),
            ));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let n = t.numel();
            tensors.push(t.with_data(flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(ParamGroup {
            tensors,
            ..self.clone()
        })
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(|t| norm_sq(t.data())).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> ParamGroup {
        ParamGroup {
            tensors: self.tensors.iter().map(|t| t.scale(c)).collect(),
            ..self.clone()
        }
    }
}

/// Per-group quantities logged at step `t`, all evaluated at `x(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: String,
    pub norm: f64,
    pub grad_norm: f64,
    /// `η/‖x‖²`
    pub eff_lr: f64,
    /// `(2λ/η)‖x‖²`
    pub r_t: f64,
    pub clip_triggered: bool,
    /// Gradient norm actually applied (the cap when clipping triggers).
    pub n_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub group: ParamGroup,
    pub stats: GroupStats,
}

pub fn effective_lr(x: &ParamGroup, cfg: &OptimizerConfig) -> Result<f64> {
    let n = x.norm();
    if n == 0.0 {
        return Err(Error::domain("effective_lr", "zero parameter norm"));
    }
    Ok(cfg.eta / (n * n))
}

fn check_grad(op: &'static str, x: &ParamGroup, grad: &[f64]) -> Result<f64> {
    if grad.len() != x.len() {
        return Err(Error::dim(op, format!("group has {} entries, gradient {}", x.len(), grad.len())));
    }
    if !all_finite(grad) {
        return Err(Error::non_finite(op, format!("gradient for group `{}`", x.name)));
    }
    Ok(norm(grad))
}

fn stats(x: &ParamGroup, eta: f64, lambda: f64, grad_norm: f64, clip: bool, n_t: f64) -> GroupStats {
    let n = x.norm();
    GroupStats {
        group: x.name.clone(),
        norm: n,
        grad_norm,
        eff_lr: eta / (n * n),
        r_t: 2.0 * lambda / eta * n * n,
        clip_triggered: clip,
        n_t,
    }
}

/// `x ← (1 − ηλ)x − c·g`, the one arithmetic kernel every rule shares.
fn decayed_update(x: &ParamGroup, decay: f64, c: f64, grad: &[f64]) -> Result<ParamGroup> {
    let flat: Vec<f64> = x.flat().iter().zip(grad).map(|(xi, gi)| decay * xi - c * gi).collect();
    x.with_flat(&flat)
}

/// `x(t+1) = (1 − ηλ)x(t) − η∇L(x(t))`
pub fn gd_wd_step(x: &ParamGroup, grad: &[f64], cfg: &OptimizerConfig) -> Result<StepOutcome> {
    let gn = check_grad("gd_wd_step", x, grad)?;
    let group = decayed_update(x, 1.0 - cfg.eta * cfg.lambda, cfg.eta, grad)?;
    Ok(StepOutcome {
        group,
        stats: stats(x, cfg.eta, cfg.lambda, gn, false, gn),
    })
}

/// Same update with a sampled gradient `∇L_γ(x(t))`.
pub fn sgd_wd_step(x: &ParamGroup, sampled_grad: &[f64], cfg: &OptimizerConfig) -> Result<StepOutcome> {
    gd_wd_step(x, sampled_grad, cfg)
}

/// Relative global clipping: caps `‖g‖` at `√(2Cλ/η)·‖x‖` over the whole group, keeping direction.
pub fn clipped_sgd_wd_step(x: &ParamGroup, sampled_grad: &[f64], cfg: &OptimizerConfig) -> Result<StepOutcome> {
    let Some(_) = cfg.clip_factor else {
        return Err(Error::contract("clipped_sgd_wd_step", "clip_factor must be finite"));
    };
    let gn = check_grad("clipped_sgd_wd_step", x, sampled_grad)?;
    let cap = cfg.clip_ratio() * x.norm();
    let decay = 1.0 - cfg.eta * cfg.lambda;
    if gn > cap {
        let group = decayed_update(x, decay, cfg.eta * cap / gn, sampled_grad)?;
        Ok(StepOutcome {
            group,
            stats: stats(x, cfg.eta, cfg.lambda, gn, true, cap),
        })
    } else if gn == 0.0 {
        let group = decayed_update(x, decay, 0.0, sampled_grad)?;
        Ok(StepOutcome {
            group,
            stats: stats(x, cfg.eta, cfg.lambda, 0.0, false, 0.0),
        })
    } else {
        let group = decayed_update(x, decay, cfg.eta, sampled_grad)?;
        Ok(StepOutcome {
            group,
            stats: stats(x, cfg.eta, cfg.lambda, gn, false, gn),
        })
    }
}

/// `x ← x − ηg`, no decay, no clipping.
pub fn plain_sgd_step(x: &ParamGroup, grad: &[f64], eta: f64) -> Result<StepOutcome> {
    let gn = check_grad("plain_sgd_step", x, grad)?;
    let group = decayed_update(x, 1.0, eta, grad)?;
    Ok(StepOutcome {
        group,
        stats: stats(x, eta, 0.0, gn, false, gn),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Sampled loss `L_γt(x(t))`.
    pub loss: f64,
    pub groups: Vec<GroupStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub config: OptimizerConfig,
    pub seed: u64,
    /// Set when the run stopped early: divergence or a loss domain error.
    pub failure: Option<String>,
    /// Parameters after the last successful step.
    pub final_groups: Vec<ParamGroup>,
}

pub const CSV_HEADER: [&str; 9] = ["step", "loss", "group", "norm", "grad_norm", "eff_lr", "r_t", "clip", "n_t"];

impl Trajectory {
    pub fn diverged(&self) -> bool {
        self.failure.is_some()
    }

    /// Norm of group `g` at every logged step, followed by its final norm.
    pub fn norms(&self, g: usize) -> Vec<f64> {
        let mut v: Vec<f64> = self.records.iter().map(|r| r.groups[g].norm).collect();
        if let Some(last) = self.final_groups.get(g) {
            v.push(last.norm());
        }
        v
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean of the last `max(1, T/10)` logged losses.
    pub fn final_loss(&self) -> f64 {
        let n = self.records.len();
        if n == 0 {
            return f64::NAN;
        }
        let w = (n / 10).max(1);
        self.records[n - w..].iter().map(|r| r.loss).sum::<f64>() / w as f64
    }

    /// Fraction of (step, group) entries whose update was clipped.
    pub fn clip_frequency(&self) -> f64 {
        let total: usize = self.records.iter().map(|r| r.groups.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let hits = self
            .records
            .iter()
            .flat_map(|r| &r.groups)
            .filter(|g| g.clip_triggered)
            .count();
        hits as f64 / total as f64
    }

    /// One row per (step, group) under [`CSV_HEADER`].
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(CSV_HEADER).map_err(io)?;
        for r in &self.records {
            for g in &r.groups {
                w.write_record([
                    r.step.to_string(),
                    r.loss.to_string(),
                    g.group.clone(),
                    g.norm.to_string(),
                    g.grad_norm.to_string(),
                    g.eff_lr.to_string(),
                    g.r_t.to_string(),
                    u8::from(g.clip_triggered).to_string(),
                    g.n_t.to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Steps a loss family forward one update at a time.
///
/// Scale-invariant groups take SGD+WD (clipped when `clip_factor` is set); other groups
/// take plain SGD at `plain_eta`.
pub struct Trainer {
    loss: Box<dyn StochasticLoss>,
    groups: Vec<ParamGroup>,
    cfg: OptimizerConfig,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(loss: &dyn StochasticLoss, groups: Vec<ParamGroup>, cfg: OptimizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let spec = loss.groups();
        if spec.len() != groups.len() || spec.iter().zip(&groups).any(|(s, g)| s.len != g.len()) {
            return Err(Error::dim(
                "Trainer::new",
                format!(
                    "loss expects group sizes {:?}, got {:?}",
                    spec.iter().map(|s| s.len).collect::<Vec<_>>(),
                    groups.iter().map(ParamGroup::len).collect::<Vec<_>>()
                ),
            ));
        }
        let mut loss = loss.clone_box();
        loss.reset();
        Ok(Trainer {
            loss,
            groups,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn flat(&self) -> Vec<f64> {
        self.groups.iter().flat_map(ParamGroup::flat).collect()
    }

    /// Samples γ, evaluates, updates every group. On error the parameters are unchanged.
    pub fn step(&mut self) -> Result<StepRecord> {
        let sample = self.loss.sample(&mut self.rng);
        let eval = self.loss.eval(sample, &self.flat())?;
        if !eval.loss.is_finite() {
            return Err(Error::non_finite("Trainer::step", format!("loss is {}", eval.loss)));
        }
        let cfg = self.cfg.at_step(self.step);
        let mut offset = 0;
        let mut next = Vec::with_capacity(self.groups.len());
        let mut stats = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let grad = &eval.grad[offset..offset + g.len()];
            offset += g.len();
            let out = if !g.scale_invariant {
                plain_sgd_step(g, grad, cfg.plain_eta.unwrap_or(cfg.eta))?
            } else if cfg.clip_factor.is_some() {
                clipped_sgd_wd_step(g, grad, &cfg)?
            } else {
                sgd_wd_step(g, grad, &cfg)?
            };
            next.push(out.group);
            stats.push(out.stats);
        }
        self.groups = next;
        let rec = StepRecord {
            step: self.step,
            loss: eval.loss,
            groups: stats,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Names the first group that left the finite range or exceeded the divergence norm.
    fn divergence(&self) -> Option<String> {
        self.groups.iter().find_map(|g| {
            let n = g.norm();
            (!n.is_finite() || n > self.cfg.divergence_norm)
                .then(|| format!("diverged after step {}: group `{}` norm {n}", self.step - 1, g.name))
        })
    }
}

/// Runs `steps` updates. Divergence and loss domain errors truncate the trajectory and
/// set `failure`; they are results, not errors.
pub fn run_training(
    loss: &dyn StochasticLoss,
    groups: Vec<ParamGroup>,
    cfg: &OptimizerConfig,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::contract("run_training", "need at least one step"));
    }
    let mut trainer = Trainer::new(loss, groups, cfg.clone(), seed)?;
    let mut records = Vec::with_capacity(steps);
    let mut failure = None;
    for _ in 0..steps {
        match trainer.step() {
            Ok(rec) => records.push(rec),
            Err(e @ (Error::Domain { .. } | Error::NonFinite { .. })) => {
                failure = Some(format!("stopped at step {}: {e}", trainer.step_index()));
                break;
            }
            Err(e) => return Err(e),
        }
        if let Some(msg) = trainer.divergence() {
            failure = Some(msg);
            break;
        }
    }
    Ok(Trajectory {
        records,
        config: cfg.clone(),
        seed,
        failure,
        final_groups: trainer.groups,
    })
}

/// Groups laid out as the loss declares them, filled from a flat vector.
pub fn groups_from_flat(loss: &dyn StochasticLoss, flat: &[f64]) -> Result<Vec<ParamGroup>> {
    let spec = loss.groups();
    let total: usize = spec.iter().map(|s| s.len).sum();
    if flat.len() != total {
        return Err(Error::dim("groups_from_flat", format!("need {total} entries, got {}", flat.len())));
    }
    let mut offset = 0;
    Ok(spec
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let g = ParamGroup::new(
                &s.name,
                vec![Tensor::vector(flat[offset..offset + s.len].to_vec())],
                s.scale_invariant,
                i,
            );
            offset += s.len;
            g
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{AngleFamily, Rayleigh};

    fn cfg(eta: f64, lambda: f64) -> OptimizerConfig {
        OptimizerConfig::new(eta, lambda)
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let x = ParamGroup::from_vec("x", vec![1.0, -2.0], true);
        let out = gd_wd_step(&x, &[0.0, 0.0], &cfg(0.1, 0.0)).unwrap();
        assert_eq!(out.group, x);
    }

    #[test]
    fn arithmetic_example() {
        let x = ParamGroup::from_vec("x", vec![1.0, 0.0], true);
        let out = gd_wd_step(&x, &[0.0, 1.0], &cfg(0.1, 0.1)).unwrap();
        let f = out.group.flat();
        assert!((f[0] - 0.99).abs() < 1e-15 && (f[1] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let x = ParamGroup::from_vec("x", vec![1.0, 0.0], true);
        assert!(matches!(gd_wd_step(&x, &[f64::NAN, 0.0], &cfg(0.1, 0.1)), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn paper_constants_give_threshold_ten_times_norm() {
        let c = cfg(0.0008, 0.01).with_clip(4.0);
        assert!((c.clip_ratio() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_below_threshold_equals_sgd_bitwise() {
        let c = cfg(0.0008, 0.01).with_clip(4.0);
        let x = ParamGroup::from_vec("x", vec![0.6, 0.8], true);
        let g = [3.0, -4.0]; // ‖g‖ = 5 < 10
        let a = clipped_sgd_wd_step(&x, &g, &c).unwrap();
        let b = sgd_wd_step(&x, &g, &c).unwrap();
        assert_eq!(a.group, b.group);
        assert!(!a.stats.clip_triggered);
    }

    #[test]
    fn clipping_caps_update_magnitude() {
        let c = cfg(0.0008, 0.01).with_clip(4.0);
        let x = ParamGroup::from_vec("x", vec![0.6, 0.8], true);
        let g = [60.0, -80.0]; // ‖g‖ = 100 = 10× threshold
        let out = clipped_sgd_wd_step(&x, &g, &c).unwrap();
        assert!(out.stats.clip_triggered);
        let decayed: Vec<f64> = x.flat().iter().map(|v| (1.0 - 0.0008 * 0.01) * v).collect();
        let applied = norm(&crate::vecmath::sub(&decayed, &out.group.flat()));
        assert!((applied - 0.0008 * 10.0).abs() <= 1e-12 * 0.008);
        assert_eq!(out.stats.n_t, 10.0);
    }

    #[test]
    fn zero_gradient_clipped_step_is_pure_decay() {
        let c = cfg(0.1, 0.1).with_clip(2.0);
        let x = ParamGroup::from_vec("x", vec![1.0, 2.0], true);
        let out = clipped_sgd_wd_step(&x, &[0.0, 0.0], &c).unwrap();
        assert_eq!(out.group.flat(), vec![0.99, 1.98]);
        assert_eq!(out.stats.n_t, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0.1, 0.1).validate().is_ok());
        assert!(cfg(0.0, 0.1).validate().is_err());
        assert!(cfg(2.0, 0.5).validate().is_err());
        assert!(cfg(0.1, 0.1).with_clip(1.0).validate().is_err());
        assert!(cfg(0.1, 0.0).with_clip(2.0).validate().is_err());
        assert!(cfg(0.1, 0.1).with_schedule(vec![(5, 0.5), (5, 0.1)]).validate().is_err());
        assert!(cfg(0.5, 1.0).with_schedule(vec![(5, 3.0)]).validate().is_err());
    }

    #[test]
    fn schedule_is_piecewise_constant() {
        let c = cfg(0.1, 0.0).with_schedule(vec![(10, 0.5), (20, 0.1)]);
        assert_eq!(c.eta_at(0), 0.1);
        assert_eq!(c.eta_at(9), 0.1);
        assert_eq!(c.eta_at(10), 0.05);
        assert!((c.eta_at(25) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn effective_lr_examples() {
        let c = cfg(0.3, 0.0);
        let x = ParamGroup::from_vec("x", vec![0.6, 0.8], true);
        assert!((effective_lr(&x, &c).unwrap() - 0.3).abs() < 1e-15);
        assert!((effective_lr(&x.scaled(2.0), &c).unwrap() - 0.075).abs() < 1e-15);
        assert!(effective_lr(&x.scaled(0.0), &c).is_err());
    }

    #[test]
    fn one_step_run_equals_manual_step() {
        let loss = Rayleigh::new(Tensor::diag(&[2.0, -1.0, 0.5])).unwrap();
        let x = vec![0.3, 0.4, -1.0];
        let c = cfg(0.1, 0.01);
        let traj = run_training(&loss, groups_from_flat(&loss, &x).unwrap(), &c, 1, 0).unwrap();
        let g = loss.mean_eval(&x).unwrap().grad;
        let manual = gd_wd_step(&ParamGroup::from_vec("x", x, true), &g, &c).unwrap();
        assert_eq!(traj.final_groups[0].flat(), manual.group.flat());
        assert_eq!(traj.records[0].groups[0], manual.stats);
    }

    #[test]
    fn csv_has_documented_header_and_one_row_per_group_step() {
        let loss = AngleFamily::new(1.0);
        let traj = run_training(&loss, groups_from_flat(&loss, &[1.0, 0.0]).unwrap(), &cfg(0.01, 0.1), 3, 1).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,loss,group,norm,grad_norm,eff_lr,r_t,clip,n_t");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn domain_error_truncates_with_failure_marker() {
        let loss = AngleFamily::new(1.0);
        let traj = run_training(&loss, groups_from_flat(&loss, &[-1.0, 0.0]).unwrap(), &cfg(0.1, 0.0), 50, 3).unwrap();
        assert!(traj.failure.as_deref().unwrap().contains("domain"));
        assert!(traj.records.is_empty());
    }
}
