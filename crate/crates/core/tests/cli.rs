//! Configuration handling, exit codes and the subcommands on small problems.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use follicle::cli::{self, Method, Overrides, RunConfig};
use follicle::Error;
use serde_json::{json, Value};
use tempfile::TempDir;

const PARAMS: &str = include_str!("../configs/default_params.json");

fn params_with(edit: impl FnOnce(&mut Value)) -> String {
    let mut v: Value = serde_json::from_str(PARAMS).unwrap();
    edit(&mut v);
    v.to_string()
}

fn bump() -> Value {
    json!({ "breaks": [0.0, 1.0], "coeffs": [[0.0, 0.0, 30.0, -60.0, 30.0]] })
}

/// A short-horizon workspace with a bump datum.
fn workspace(amplitude: f64, extra: Value) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("params.json"),
        params_with(|v| v["horizon"] = json!(0.02)),
    )
    .unwrap();
    let mut cfg = json!({
        "params": "params.json",
        "initial_data": { "all": [{ "kind": "polynomial", "amplitude": amplitude, "x": bump(), "y": bump() }] },
        "output_samples": 5,
        "fixed_point": { "knots_per_window": 16 },
        "fv": { "resolution": 16, "cfl": 0.9, "resolutions": [8, 16, 32] },
        "bound_samples": 50
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.path().join("run.json");
    fs::write(&path, cfg.to_string()).unwrap();
    (dir, path)
}

fn bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_follicle"))
        .args(args)
        .env("FOLLICLE_THREADS", "1")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_config_fields_are_rejected() {
    let err = RunConfig::from_json_str(r#"{"params": "p.json", "bogus": 1}"#).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)));
    assert_eq!(cli::exit_code(&err), 2);
    let err = RunConfig::from_json_str(r#"{"params": "p.json", "fv": {"cells": 3}}"#).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)));
}

#[test]
fn method_parses_known_names_only() {
    assert_eq!("char".parse::<Method>().unwrap(), Method::Char);
    assert_eq!("fv".parse::<Method>().unwrap(), Method::Fv);
    assert_eq!("both".parse::<Method>().unwrap(), Method::Both);
    assert!("rk4".parse::<Method>().is_err());
}

#[test]
fn out_of_range_times_are_rejected() {
    let (_d, path) = workspace(1.0, json!({ "snapshot_times": [0.5] }));
    let err = cli::load(&path, &Overrides::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)));
}

#[test]
fn overrides_apply_on_top_of_the_file() {
    let (_d, path) = workspace(1.0, json!({}));
    let ov = Overrides {
        method: Some(Method::Fv),
        fp_tol: Some(1e-6),
        disable_mitosis: true,
        zero_loss: true,
        seed: Some(42),
        ..Overrides::default()
    };
    let s = cli::load(&path, &ov).unwrap();
    assert_eq!(s.config.method, Method::Fv);
    assert_eq!(s.config.fixed_point.tol, 1e-6);
    assert_eq!(s.problem.hooks.mitosis_factor, 1.0);
    assert!(s.problem.hooks.zero_loss);
    assert_eq!(s.config.fixed_point.seed, 42);
    assert_eq!(s.output_times.len(), 5);
}

#[test]
fn missing_config_exits_with_two() {
    let out = bin(&["constants", "--config", "/nonexistent/run.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn violated_assumptions_exit_with_three() {
    let (d, path) = workspace(1.0, json!({}));
    fs::write(
        d.path().join("params.json"),
        params_with(|v| {
            v["c1"] = json!(0.1);
            v["c2"] = json!(0.1);
        }),
    )
    .unwrap();
    let out = bin(&["constants", "--config", s(&path)]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn constants_prints_the_window() {
    let (_d, path) = workspace(1.0, json!({}));
    let out = bin(&["constants", "--config", s(&path)]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["K ", "K1", "K2", "delta", "C1_1", "C2_2"] {
        assert!(text.contains(key), "missing {key} in {text}");
    }
}

#[test]
fn run_writes_both_methods() {
    let (d, path) = workspace(
        1.0,
        json!({ "snapshot_times": [0.0, 0.02], "snapshot_resolution": 8 }),
    );
    let out_dir = d.path().join("out");
    let out = bin(&[
        "run",
        "--config",
        s(&path),
        "--out",
        s(&out_dir),
        "--dump-chains",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "maturity_char.csv",
        "maturity_fv.csv",
        "snapshot_char_000.csv",
        "snapshot_char_001.csv",
        "snapshot_fv_001.csv",
        "chains.json",
        "manifest.json",
    ] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["bounds"]["maturity_slack"].as_f64().unwrap() > 0.0);
    let csv = fs::read_to_string(out_dir.join("maturity_char.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn converge_needs_three_resolutions() {
    let (d, path) = workspace(1.0, json!({}));
    let s = cli::load(&path, &Overrides::default()).unwrap();
    let err = cli::cmd_converge(&s, &d.path().join("c"), Some(&[8, 16])).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)));
}

#[test]
fn converge_char_against_itself_is_exact() {
    let (d, path) = workspace(1.0, json!({ "method": "char" }));
    let s = cli::load(&path, &Overrides::default()).unwrap();
    let r = cli::cmd_converge(&s, &d.path().join("c"), Some(&[4, 8, 16])).unwrap();
    assert!(r.maturity.iter().all(|row| row.linf_error == 0.0));
    assert!(r.l1.iter().all(|row| row.l1_error == 0.0));
}

#[test]
fn converge_fv_errors_shrink() {
    let (d, path) = workspace(1.0, json!({ "method": "fv" }));
    let s = cli::load(&path, &Overrides::default()).unwrap();
    let r = cli::cmd_converge(&s, &d.path().join("c"), Some(&[8, 16, 32])).unwrap();
    let e: Vec<f64> = r.maturity.iter().map(|row| row.linf_error).collect();
    assert!(e[2] < e[1] && e[1] < e[0], "{e:?}");
    assert!(d.path().join("c/converge_maturity.csv").is_file());
}

fn quick_verify() -> Value {
    json!({
        "contraction_pairs": 2,
        "jacobian_segments": 20,
        "weak_tests": 2,
        "bound_samples": 200,
        "trace_samples": 20,
        "linearity_samples": 20,
        "fv_resolution": 16
    })
}

#[test]
fn verify_passes_on_zero_data() {
    let (d, path) = workspace(0.0, json!({ "verify": quick_verify() }));
    let s = cli::load(&path, &Overrides::default()).unwrap();
    let r = cli::cmd_verify(&s, &d.path().join("v")).unwrap();
    assert!(
        r.passed,
        "{:#?}",
        r.properties
            .iter()
            .filter(|p| !p.passed)
            .collect::<Vec<_>>()
    );
    assert!(d.path().join("v/verify.json").is_file());
}

#[test]
fn verify_catches_a_perturbed_jacobian() {
    let (d, path) = workspace(
        1.0,
        json!({ "verify": quick_verify(), "hooks": { "mitosis_factor": 2.0, "zero_loss": false, "jacobian_perturbation": 0.01 } }),
    );
    let s = cli::load(&path, &Overrides::default()).unwrap();
    let r = cli::cmd_verify(&s, &d.path().join("v")).unwrap();
    assert!(!r.passed);
    let jac = r.properties.iter().find(|p| p.name == "jacobian").unwrap();
    assert!(!jac.passed && jac.value > 1e-3, "{jac:?}");
    assert!(jac.detail.starts_with("20 segments"), "{jac:?}");
}
