use std::path::Path;
use std::process::{Command, Output};

fn fakeprint(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fakeprint"))
        .current_dir(cwd)
        .env_remove("FAKEPRINT_OUT")
        .arg("-q")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = fakeprint(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn macs_with_bundled_configs() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["macs", "--out", "m"]);
    let printed: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let saved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("m/report.json")).unwrap()).unwrap();
    assert_eq!(printed, saved);
    assert!(saved["ratio"].as_f64().unwrap() > 1.0);
    assert!(dir.path().join("m/run_config.toml").is_file());
}

#[test]
fn missing_input_is_a_user_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = fakeprint(dir.path(), &["train", "--train", "absent.jsonl", "--val", "absent.jsonl", "--out", "det"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(!dir.path().join("det").exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unknown_flag_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fakeprint(dir.path(), &["macs", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(fakeprint(dir.path(), &["sweep", "--kind", "warp", "--checkpoint", "x", "--manifest", "y"]).status.code(), Some(2));
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "seed = \"not a number\"\n").unwrap();
    let out = fakeprint(dir.path(), &["--config", "c.toml", "macs"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn default_output_root_follows_env() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fakeprint"))
        .current_dir(dir.path())
        .env("FAKEPRINT_OUT", dir.path().join("root"))
        .args(["-q", "macs"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("root/macs/report.json").is_file());
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "9", "gen-textures", "--n", "24", "--side", "40", "--out", "tex"]);
    ok(d, &["train-ae", "--manifest", "tex/manifest.jsonl", "--epochs", "1", "--out", "ae"]);
    ok(d, &["reconstruct", "--manifest", "tex/manifest.jsonl", "--autoencoder", "toy:ae", "--save-policy", "png", "--out", "rec"]);
    ok(d, &["split", "--manifest", "rec/dataset.jsonl", "--fractions", "0.5,0.25,0.25", "--out", "sp"]);
    ok(d, &[
        "train", "--train", "sp/split_0.jsonl", "--val", "sp/split_1.jsonl", "--epochs", "1",
        "--batch-size", "8", "--crop", "32", "--composer", "sync", "--out", "det",
    ]);
    ok(d, &["calibrate", "--checkpoint", "det", "--val", "sp/split_1.jsonl", "--out", "cal"]);
    ok(d, &["eval", "--checkpoint", "cal", "--manifest", "sp/split_2.jsonl", "--out", "ev"]);
    ok(d, &["sweep", "--checkpoint", "cal", "--manifest", "sp/split_2.jsonl", "--kind", "blur", "--levels", "0,1", "--out", "sw"]);
    ok(d, &["postprocess", "--manifest", "sp/split_2.jsonl", "--out", "pp"]);

    for f in [
        "tex/manifest.jsonl",
        "ae/training.json",
        "rec/fake.jsonl",
        "sp/split_2.jsonl",
        "det/checkpoint.json",
        "cal/calibration.json",
        "ev/report.json",
        "ev/groups.csv",
        "ev/scores.json",
        "sw/blur_sigma.csv",
        "sw/blur_sigma.svg",
        "pp/manifest.jsonl",
    ] {
        assert!(d.join(f).is_file(), "{f} missing");
    }
    for sub in ["tex", "ae", "rec", "sp", "det", "cal", "ev", "sw", "pp"] {
        let snap = std::fs::read_to_string(d.join(sub).join("run_config.toml")).unwrap();
        assert!(snap.contains("seed = 9"), "{sub} snapshot lacks the seed");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("ev/report.json")).unwrap()).unwrap();
    let cal: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("cal/calibration.json")).unwrap()).unwrap();
    assert_eq!(report["threshold"], cal["threshold"]);
    let curve = std::fs::read_to_string(d.join("sw/blur_sigma.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
}
