//! Exit codes and config overrides of the `faithsae` binary, on the small
//! smoke config.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn faithsae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faithsae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = faithsae(&["--config", missing.to_str().unwrap(), "generate"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn unknown_override_key_is_a_config_error() {
    let out = faithsae(&["--config", smoke_config().to_str().unwrap(), "--set", "sae.nope.x=1", "generate"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn invalid_override_value_is_a_config_error() {
    let out = faithsae(&["--config", smoke_config().to_str().unwrap(), "--set", "tau_f=2.5", "generate"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn report_without_inputs_names_them() {
    let dir = tempfile::tempdir().unwrap();
    let out = faithsae(&["--config", smoke_config().to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "report"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("reports/match.json"), "{err}");
}

#[test]
fn set_overrides_reach_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out_dir) = (smoke_config(), dir.path().to_str().unwrap().to_string());
    let base = ["--config", cfg.to_str().unwrap(), "--out", &out_dir];
    assert_eq!(code(&faithsae(&[&base[..], &["train-lm"]].concat())), 0);
    let out = faithsae(&[&base[..], &["--set", "datasets.2.source.n_tokens=500", "generate"]].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("stats/random.json")).unwrap()).unwrap();
    assert_eq!(stats["total_tokens"], 500);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("random") && l.contains(" 500 ")), "{stdout}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["artifacts"]["corpora/random.ftok"], "generate");
}

#[test]
fn strict_report_fails_on_a_failing_property() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let out = faithsae(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--seed-override",
        "100",
        "report",
        "--all",
        "--strict",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let any_fail = stdout.lines().any(|l| l.starts_with("[FAIL]"));
    assert_eq!(code(&out), if any_fail { 4 } else { 0 }, "{stdout}");
    assert!(dir.path().join("saes/faithful-s100.json").exists());
    assert!(dir.path().join("saes/faithful-s101.json").exists());
    assert!(dir.path().join("report.md").exists());
}
