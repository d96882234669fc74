//! Drives the `synthdesign` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;
use synthdesign::cli::{objective_of_signs, parse_panel_csv, PanelCsvSpec};
use synthdesign::simulate::{generate_realizable, RealizableSpec};
use synthdesign::numerics::Matrix;
use synthdesign::{run_design, DesignConfig, Variant};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_synthdesign"));
    c.env_remove("SYNTHDESIGN_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("bad JSON ({e}): {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

fn prop99() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/california_prop99.csv").to_string()
}

fn signs(v: &Value) -> Vec<i8> {
    v.as_array().unwrap().iter().map(|s| s.as_i64().unwrap() as i8).collect()
}

/// Long-format CSV of a realizable instance, periods numbered from 1.
fn realizable_csv(dir: &Path, n: usize, seed: u64) -> (std::path::PathBuf, String) {
    let inst = generate_realizable(&RealizableSpec::new(n, n - 2, 40, 0.2, 0.01, seed)).unwrap();
    let panel = &inst.panel.panel;
    let y = panel.outcomes();
    let mut text = String::from("unit,period,value\n");
    for i in 0..y.nrows() {
        for (t, v) in y.row(i).iter().enumerate() {
            text.push_str(&format!("u{i:03},{},{v:?}\n", t + 1));
        }
    }
    let path = dir.join(format!("realizable_{n}_{seed}.csv"));
    std::fs::write(&path, &text).unwrap();
    (path, text)
}

/// Writes `y` (all periods pre) as long-format CSV.
fn matrix_csv(dir: &Path, y: &Matrix, name: &str) -> std::path::PathBuf {
    let mut text = String::from("unit,period,value\n");
    for i in 0..y.nrows() {
        for (t, v) in y.row(i).iter().enumerate() {
            text.push_str(&format!("u{i:03},{},{v:?}\n", t + 1));
        }
    }
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn two_unit_toy_design() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.csv");
    std::fs::write(&path, "unit,time,y\na,1,1.0\na,2,2.0\nb,1,3.0\nb,2,5.0\n").unwrap();
    let out = run(&["design", "--input", path.to_str().unwrap(), "--pre", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    let s = signs(&v["signs"]);
    assert_eq!(s.len(), 2);
    assert_eq!(s[0], -s[1]);
    assert_eq!(v["weights"], serde_json::json!([1.0, 1.0]));
    assert_eq!(v["treated_units"].as_array().unwrap().len(), 1);
    for key in ["method", "per_period_estimates", "aggregate", "rmse", "objective", "iterations", "converged", "seed", "config"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn json_round_trip_reproduces_objective() {
    let dir = tempfile::tempdir().unwrap();
    let (path, text) = realizable_csv(dir.path(), 8, 3);
    let file = dir.path().join("design.json");
    for variant in ["spcd", "normspcd"] {
        let out = run(&[
            "design",
            "--input",
            path.to_str().unwrap(),
            "--pre",
            "30",
            "--variant",
            variant,
            "--output",
            file.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
        let config: DesignConfig = serde_json::from_value(v["config"].clone()).unwrap();
        let panel = parse_panel_csv(&text, &PanelCsvSpec { pre_periods: 30, ..Default::default() }).unwrap();
        let f = objective_of_signs(&panel.pre_matrix(), &signs(&v["signs"]), &config).unwrap();
        let stored = v["objective"].as_f64().unwrap();
        assert!((f - stored).abs() <= 1e-12 * stored.abs().max(1.0), "{variant}: {f} vs {stored}");
        let w: Vec<f64> = serde_json::from_value(v["weights"].clone()).unwrap();
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 2.0).abs() <= 1e-8);
    }
}

#[test]
fn oracle_agrees_with_design_on_realizable_panel() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = realizable_csv(dir.path(), 6, 11);
    let p = path.to_str().unwrap();
    let design = json(&run(&["design", "--input", p, "--pre", "30"]));
    let out = run(&["oracle", "--input", p, "--pre", "30", "--lambda-sweep"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let oracle = json(&out);
    let best = signs(&oracle["best_signs"]["signs"]);
    let found = signs(&design["signs"]);
    let negated: Vec<i8> = found.iter().map(|s| -s).collect();
    assert!(best == found || best == negated, "{best:?} vs {found:?}");
    assert!(oracle["lambda_sweep"]["lambda0"].as_f64().is_some());
}

#[test]
fn oracle_refuses_large_panels() {
    let out = run(&["oracle", "--input", &prop99(), "--pre", "15", "--exclude", "California"]);
    assert_eq!(out.status.code(), Some(4));
    let out = run(&["oracle", "--input", &prop99(), "--pre", "15", "--cap", "10"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(run(&["design"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["design", "--input", "/nonexistent.csv", "--pre", "3"]).status.code(), Some(1));
    assert_eq!(run(&["design", "--input", &prop99(), "--pre", "3", "--alpha", "abc"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_configuration_exits_two() {
    let out = run(&["design", "--input", &prop99(), "--pre", "15", "--beta=-1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["design", "--input", &prop99(), "--pre", "40"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn iteration_cap_exits_three_with_output() {
    // most spectral starts are already fixed points; find a panel that is not
    let config = DesignConfig { variant: Variant::Spcd, ..DesignConfig::default() };
    let y = (0..2000u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(8..30);
            let t = rng.random_range(2..25);
            Matrix::from_fn(n, t, |_, _| StandardNormal.sample(&mut rng))
        })
        .find(|y| run_design(y, &config).unwrap().iterations >= 2)
        .expect("some panel needs two steps");
    let dir = tempfile::tempdir().unwrap();
    let path = matrix_csv(dir.path(), &y, "multi_step.csv");
    let file = dir.path().join("capped.json");
    let pre = y.ncols().to_string();
    let out = bin()
        .args(["design", "--input", path.to_str().unwrap(), "--pre", &pre, "--variant", "spcd", "--max-iters", "1"])
        .arg("--output")
        .arg(&file)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
    assert_eq!(v["converged"], Value::Bool(false));
    assert_eq!(v["signs"].as_array().unwrap().len(), y.nrows());
}

#[test]
fn check_command_passes() {
    let out = run(&["check"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 3);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn seed_environment_variable_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = realizable_csv(dir.path(), 6, 2);
    let out = bin()
        .args(["design", "--input", path.to_str().unwrap(), "--pre", "30", "--seed", "5"])
        .env("SYNTHDESIGN_SEED", "77")
        .output()
        .unwrap();
    assert_eq!(json(&out)["seed"], 77);
    let out = bin().args(["check"]).env("SYNTHDESIGN_SEED", "nope").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn evaluate_prop99_reports_each_method() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("records.csv");
    let out = run(&[
        "evaluate",
        "--input",
        &prop99(),
        "--pre",
        "25",
        "--exclude",
        "California",
        "--reps",
        "3",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    let methods: Vec<&str> = v["summaries"].as_array().unwrap().iter().map(|s| s["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["spcd", "random", "sc"]);
    assert_eq!(v["records"].as_array().unwrap().len(), 9);
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 10);
}

#[test]
fn simulate_runs_small_experiment() {
    let out = run(&["simulate", "--regime", "ar1", "--reps", "4", "--methods", "normspcd,sc", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["tau_true"], 1.0);
    assert_eq!(v["records"].as_array().unwrap().len(), 8);
    let again = json(&run(&["simulate", "--regime", "ar1", "--reps", "4", "--methods", "normspcd,sc", "--seed", "3"]));
    assert_eq!(v["summaries"], again["summaries"]);
}
