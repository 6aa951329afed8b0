use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MINIMAL: &str = r#"{
  "phantom": "slab",
  "phantom_grid": {"dims": [40, 48, 32], "spacing_mm": 2.5},
  "detector": {"width": 48, "height": 48, "pitch_mm": 3.0},
  "registration_only": true,
  "register": {"n_starts": 2, "max_iters": 150},
  "recon": {"grid": {"dims": [32, 40, 32], "spacing_mm": 2.5}}
}"#;

fn radgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radgs"))
        .args(args)
        .env_remove("RADGS_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"register": {"levels": 3, "pyramid": 2}}"#);
    let out = radgs(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pyramid"));
}

#[test]
fn bad_thread_count_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = radgs(&["phantom", "--threads", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let env = Command::new(env!("CARGO_BIN_EXE_radgs"))
        .args(["phantom", "--out", dir.path().to_str().unwrap()])
        .env("RADGS_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(env.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = radgs(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stages_run_one_at_a_time_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINIMAL);
    let out_dir = dir.path().join("run");
    let out = out_dir.to_str().unwrap();
    for stage in ["phantom", "drr", "reconstruct", "register"] {
        let o = radgs(&[stage, "--config", &cfg, "--out", out, "--seed", "3", "--threads", "1"]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let eval = radgs(&["eval", "--config", &cfg, "--out", out, "--seed", "3"]);
    assert!(eval.status.success());
    let metrics: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert!(metrics["mtre_mm"].as_f64().unwrap() < 2.0, "{metrics}");
    let reg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("registration.json")).unwrap()).unwrap();
    for key in ["quat_wxyz", "trans_mm", "objective", "iters", "wall_ms", "starts"] {
        assert!(reg.get(key).is_some(), "{key}");
    }
}

#[test]
fn run_then_verify_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINIMAL);
    let out_dir = dir.path().join("run");
    let out = out_dir.to_str().unwrap();
    assert!(radgs(&["run", "--config", &cfg, "--out", out]).status.success());
    assert!(radgs(&["verify", "--out", out]).status.success());
    fs::write(out_dir.join("metrics.json"), "{}").unwrap();
    let v = radgs(&["verify", "--out", out]);
    assert_eq!(v.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&v.stderr).contains("metrics.json"));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = radgs(&["selftest", "--out", dir.path().to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 3);
}

#[test]
fn sweep_with_no_bins_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"sweep": {"max_mm": 0.0, "trials_per_bin": 10}}"#);
    let o = radgs(&[
        "sweep-cr",
        "--config",
        &cfg,
        "--out",
        dir.path().join("s").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["capture_range"], "0-0");
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert!(dir.path().join("s/cr_trials.csv").exists());
}
