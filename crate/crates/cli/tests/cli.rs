use std::process::Command;

fn silab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_silab"))
}

#[test]
fn verify_single_module_exits_zero() {
    let out = silab().args(["verify", "--scope", "clipstats"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS clipstats/") || l == "8 checks, 0 failed"));
}

#[test]
fn unknown_scope_is_an_error() {
    let out = silab().args(["verify", "--scope", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_honours_the_output_dir_variable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("angle.cfg");
    std::fs::write(&cfg, "loss = angle\neta = 0.01\nlambda = 0.1\nsteps = 50\nout_dir = ignored\n").unwrap();
    let out = silab()
        .current_dir(dir.path())
        .env("SILAB_OUT_DIR", dir.path().join("runs"))
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs/train-angle-scale1");
    for f in ["trajectory.csv", "summary.json", "config.txt", "run.log"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(!dir.path().join("ignored").exists());
    let summary: String = String::from_utf8(out.stdout).unwrap();
    assert!(summary.contains("\"equilibrium\""));
}

#[test]
fn bad_config_reports_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "loss = angle\neta = -1\nsteps = 5\n").unwrap();
    let out = silab().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 2") && err.contains("eta"), "{err}");
}

#[test]
fn clipstats_prints_a_json_report() {
    let fixture = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/interval.csv");
    let out = silab().args(["clipstats", "--dist", fixture, "--c", "4"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("\"classification\": \"interval\""), "{text}");
}
