use silab::harness::run::{cmd_clipstats, parse_dist_csv, spread};
use silab::harness::{run_one, sweep_into, train_into, ExperimentConfig, LossSpec, Variant};
use silab::clipstats::{Classification, Convention};
use silab::Error;

fn config_error(text: &str) -> (usize, String) {
    match ExperimentConfig::parse(text) {
        Err(Error::Config { line, field, .. }) => (line, field),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn config_errors_name_the_line_and_field() {
    assert_eq!(config_error("loss = angle\neta = 0.1\nsteps = 5\nsigmaa = 2\n"), (4, "sigmaa".into()));
    assert_eq!(config_error("loss = angle\neta = 0.1\neta = 0.2\nsteps = 5\n"), (3, "eta".into()));
    assert_eq!(config_error("loss = angle\neta = fast\nsteps = 5\n"), (2, "eta".into()));
    assert_eq!(config_error("loss = angle\neta = 0.1\n").1, "steps");
    assert!(config_error("loss = angle\neta = 0.1\nsteps = 5\nlambda = 0\nclip = 4\n").1.contains("clip"));
    assert_eq!(config_error("loss = nonsense\neta = 0.1\nsteps = 5\n").1, "loss");
}

#[test]
fn comments_and_blank_lines_are_ignored() {
    let c = ExperimentConfig::parse("# angle run\n\nloss = angle  # inline\neta = 0.01\nsteps = 3\n").unwrap();
    assert_eq!(c.loss, LossSpec::Angle { sigma: 1.0 });
    assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
}

#[test]
fn example1_above_threshold_is_flagged_diverged() {
    // threshold at X0 = 2 with k = 2 is ≈ 2.2
    let cfg = ExperimentConfig::parse("loss = example1\neta = 2.5\nsteps = 100\nx0 = 1.1892,1.1892,1.1892,1.1892\n").unwrap();
    let (_, s) = run_one(&cfg, &cfg.optimizer, 1.0).unwrap();
    assert!(s.diverged);
    assert!(s.steps_completed < 100);

    let cfg = ExperimentConfig::parse("loss = example1\neta = 0.1\nsteps = 1000\nx0 = 1.1892,1.1892,1.1892,1.1892\n").unwrap();
    let (_, s) = run_one(&cfg, &cfg.optimizer, 1.0).unwrap();
    assert!(!s.diverged);
}

#[test]
fn example2_above_four_over_a_squared_diverges() {
    let cfg = ExperimentConfig::parse("loss = example2\ntarget = 0\neta = 1.1\nsteps = 200\nx0 = 2,0.1\n").unwrap();
    let (_, s) = run_one(&cfg, &cfg.optimizer, 1.0).unwrap();
    assert!(s.diverged);
    let cfg = ExperimentConfig::parse("loss = example2\ntarget = 0\neta = 0.9\nsteps = 200\nx0 = 2,0.1\n").unwrap();
    let (_, s) = run_one(&cfg, &cfg.optimizer, 1.0).unwrap();
    assert!(!s.diverged);
}

#[test]
fn angle_run_reports_the_equilibrium() {
    let cfg = ExperimentConfig::parse("loss = angle\neta = 0.01\nlambda = 0.1\nsteps = 8000\nx0 = 1,0\n").unwrap();
    let (_, s) = run_one(&cfg, &cfg.optimizer, 1.0).unwrap();
    let eq = s.equilibrium.expect("angle runs report the equilibrium");
    assert!((eq.measured_norm_sq / eq.recursion_fixed_point - 1.0).abs() < 0.01);
    assert!((eq.quoted_closed_form / eq.recursion_fixed_point - 2f64.sqrt()).abs() < 1e-9);
}

#[test]
fn train_writes_identical_artifacts_on_rerun() {
    let cfg = ExperimentConfig::parse(
        "loss = stoch-rayleigh\nspectrum = 1,2,3\neta = 0.05\nlambda = 0.05\nclip = 4\nsteps = 300\nseed = 9\n",
    )
    .unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = train_into(&cfg, a.path()).unwrap();
    let sb = train_into(&cfg, b.path()).unwrap();
    assert_eq!(sa, sb);
    for f in ["trajectory.csv", "summary.json", "config.txt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert!(a.path().join("run.log").exists());
    let back = ExperimentConfig::parse(&std::fs::read_to_string(a.path().join("config.txt")).unwrap()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn sweep_covers_every_variant_and_scale() {
    let cfg = ExperimentConfig::parse(
        "loss = stoch-rayleigh\nspectrum = 1,2,3\neta = 0.05\nlambda = 0.05\nsteps = 200\n",
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rep = sweep_into(&cfg, &[0.1, 1.0, 10.0], dir.path()).unwrap();
    assert_eq!(rep.runs.len(), 9);
    assert_eq!(rep.spreads.len(), 3);
    for v in Variant::ALL {
        for s in [0.1, 1.0, 10.0] {
            assert!(rep.run(v, s).is_some());
        }
    }
    assert_eq!(rep.no_wd.init_scale, 10.0);
    assert!(dir.path().join("sweep.json").exists());
    assert!(dir.path().join("curves.csv").exists());
    // clip is filled in for the clipped variant even when the config has none
    assert!(rep.run(Variant::SgdWdClip, 1.0).unwrap().clip_frequency.is_some());
}

#[test]
fn spread_is_max_over_min_minus_one() {
    assert_eq!(spread(&[Some(1.0), Some(1.5), Some(1.2)]), Some(0.5));
    assert_eq!(spread(&[Some(1.0), None]), None);
}

#[test]
fn clipstats_report_classifies_the_fixtures() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
    for (file, want) in [
        ("two_roots.csv", Classification::TwoRoots),
        ("interval.csv", Classification::Interval),
        ("zero_only.csv", Classification::ZeroOnly),
    ] {
        let text = std::fs::read_to_string(format!("{dir}/{file}")).unwrap();
        let rep = cmd_clipstats(&text, 4.0, Convention::ClipAtCMu).unwrap();
        assert_eq!(rep.classification, want, "{file}");
    }
    assert!(parse_dist_csv("value,weight\n1,0.5\n2,-0.5\n").is_err());
    assert!(parse_dist_csv("1;0.5\n").is_err());
}
