use proptest::prelude::*;
use silab::homogeneity::{check_equivalent_scaling, ScalingMode};
use silab::losses::{AngleFamily, MultiGroup, Rayleigh, StochasticLoss, StochasticRayleigh};
use silab::optim::{
    clipped_sgd_wd_step, groups_from_flat, plain_sgd_step, run_training, sgd_wd_step, OptimizerConfig, ParamGroup,
};
use silab::vecmath::{dot, norm, scaled, sub};
use silab::Tensor;

/// `g` with its component along `x` removed, as for any scale-invariant loss.
fn tangent(x: &[f64], g: &[f64]) -> Vec<f64> {
    let c = dot(g, x) / dot(x, x);
    sub(g, &scaled(x, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sgd_wd_step_follows_the_norm_recursion(
        x in prop::collection::vec(-2.0..2.0f64, 5).prop_filter("nonzero", |v| norm(v) > 0.1),
        g in prop::collection::vec(-5.0..5.0f64, 5),
        eta in 1e-3..0.5f64,
        lambda in 0.0..0.5f64,
    ) {
        let g = tangent(&x, &g);
        let cfg = OptimizerConfig::new(eta, lambda);
        let out = sgd_wd_step(&ParamGroup::from_vec("x", x.clone(), true), &g, &cfg).unwrap();
        let lhs = out.group.norm().powi(2);
        let rhs = (1.0 - eta * lambda).powi(2) * dot(&x, &x) + eta * eta * dot(&g, &g);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs);
    }

    #[test]
    fn clipping_caps_at_the_relative_threshold(
        x in prop::collection::vec(-2.0..2.0f64, 4).prop_filter("nonzero", |v| norm(v) > 0.1),
        g in prop::collection::vec(-50.0..50.0f64, 4).prop_filter("nonzero", |v| norm(v) > 1e-3),
        c in 1.1..10.0f64,
    ) {
        let cfg = OptimizerConfig::new(0.01, 0.1).with_clip(c);
        let out = clipped_sgd_wd_step(&ParamGroup::from_vec("x", x.clone(), true), &g, &cfg).unwrap();
        let cap = (2.0 * c * 0.1 / 0.01f64).sqrt() * norm(&x);
        prop_assert_eq!(out.stats.clip_triggered, norm(&g) > cap);
        prop_assert!(out.stats.n_t <= cap * (1.0 + 1e-12));
        let step = sub(&scaled(&x, 1.0 - 0.01 * 0.1), &out.group.flat());
        prop_assert!((norm(&step) / 0.01 - out.stats.n_t).abs() <= 1e-9 * (1.0 + out.stats.n_t));
    }

    #[test]
    fn loss_rescale_reproduces_iterates(c in 1e-3..1e3f64, seed in 0u64..1000) {
        let loss = StochasticRayleigh::new(Tensor::diag(&[1.0, 2.0, 3.0]), 0.5).unwrap();
        let x0 = [0.3, -0.8, 0.5];
        let cfg = OptimizerConfig::new(0.05, 0.02);
        let d = check_equivalent_scaling(&loss, &cfg, &x0, c, 50, ScalingMode::LossRescale, seed).unwrap();
        prop_assert!(d.truncated_at.is_none());
        prop_assert!(d.max <= 1e-10);
    }
}

#[test]
fn plain_sgd_has_no_decay() {
    let out = plain_sgd_step(&ParamGroup::from_vec("w", vec![1.0, 2.0], false), &[0.5, -1.0], 0.1).unwrap();
    assert_eq!(out.group.flat(), vec![0.95, 2.1]);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(OptimizerConfig::new(0.0, 0.1).validate().is_err());
    assert!(OptimizerConfig::new(0.1, -1.0).validate().is_err());
    assert!(OptimizerConfig::new(0.1, 0.1).with_clip(1.0).validate().is_err());
    // clipping relative to weight decay needs weight decay
    assert!(OptimizerConfig::new(0.1, 0.0).with_clip(4.0).validate().is_err());
}

#[test]
fn runs_are_deterministic_in_the_seed() {
    let loss = StochasticRayleigh::new(Tensor::diag(&[1.0, 2.0, 3.0]), 0.5).unwrap();
    let groups = groups_from_flat(&loss, &[1.0, 0.5, -0.2]).unwrap();
    let cfg = OptimizerConfig::new(0.05, 0.01);
    let a = run_training(&loss, groups.clone(), &cfg, 200, 7).unwrap();
    let b = run_training(&loss, groups.clone(), &cfg, 200, 7).unwrap();
    let c = run_training(&loss, groups, &cfg, 200, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.records, c.records);
}

#[test]
fn trajectory_csv_has_one_row_per_group_and_step() {
    let loss = MultiGroup::new(Tensor::diag(&[1.0, 2.0]), Tensor::diag(&[3.0, 4.0])).unwrap();
    let groups = groups_from_flat(&loss, &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let traj = run_training(&loss, groups, &OptimizerConfig::new(0.1, 0.01), 10, 0).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("step,loss,group,norm,grad_norm,eff_lr,r_t,clip,n_t"));
    assert_eq!(text.lines().count(), 1 + 2 * traj.records.len());
}

#[test]
fn divergence_is_flagged_not_propagated() {
    // GD on a Rayleigh quotient with a huge step from a tiny norm explodes the norm
    let loss = Rayleigh::new(Tensor::diag(&[1.0, 100.0])).unwrap();
    let groups = groups_from_flat(&loss, &[1e-3, 1e-3]).unwrap();
    let cfg = OptimizerConfig {
        divergence_norm: 10.0,
        ..OptimizerConfig::new(1.0, 0.0)
    };
    let traj = run_training(&loss, groups, &cfg, 100, 0).unwrap();
    assert!(traj.diverged());
    assert!(traj.final_groups[0].flat().iter().all(|v| v.is_finite()));
}

#[test]
fn angle_norm_settles_at_the_recursion_fixed_point() {
    let (eta, lambda) = (0.01, 0.1);
    let loss = AngleFamily::new(1.0);
    let traj = run_training(&loss, groups_from_flat(&loss, &[1.0, 0.0]).unwrap(), &OptimizerConfig::new(eta, lambda), 3000, 0)
        .unwrap();
    let n = traj.norms(0);
    let last = n[n.len() - 1].powi(2);
    let fixed = eta / (1.0 - (1.0 - eta * lambda).powi(2)).sqrt();
    assert!((last / fixed - 1.0).abs() < 0.01, "{last} vs {fixed}");
    assert!(loss.is_scale_invariant());
}
