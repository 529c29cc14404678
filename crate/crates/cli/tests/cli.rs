use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use weakiv::estimators::{tsls, unbiased_scalar, VarianceConvention};
use weakiv::reduced_form::ols_reduced_form;
use weakiv::Dataset;

fn weakiv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weakiv")).args(args).output().expect("binary runs")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<f64>]) {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(&r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

const SMALL: [&str; 6] = ["--iterations", "6", "--draws", "3", "--inner-draws", "3"];

#[test]
fn simulate_output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("weak.json");
    let mut bytes = Vec::new();
    for (run, workers) in [("a", "1"), ("b", "3")] {
        let out_dir = dir.path().join(run);
        let mut args = vec!["simulate", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];
        args.extend(SMALL);
        args.extend(["--workers", workers]);
        let out = weakiv(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join("metadata.json").exists());
        bytes.push(fs::read(out_dir.join("result.json")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn seed_and_iteration_overrides_apply() {
    let cfg = config("weak.json");
    let mut args = vec!["simulate", "--config", cfg.to_str().unwrap(), "--seed", "7"];
    args.extend(SMALL);
    let v = stdout_json(&weakiv(&args));
    assert_eq!(v["config"]["iterations"], 6);
    assert_eq!(v["config"]["master_seed"], 7);
    let rb = v["config"]["estimators"].as_array().unwrap().iter().find(|e| e["kind"] == "rb_optimal_iv").unwrap();
    assert_eq!(rb["draws"], 3);
    assert_eq!(rb["inner_draws"], 3);
    assert!(v.get("metadata").is_none());
}

#[test]
fn csv_format_writes_loss_and_histogram_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("weak_extended.json");
    let out_dir = dir.path().join("csv");
    let out = weakiv(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--iterations",
        "4",
        "--format",
        "csv",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let losses = fs::read_to_string(out_dir.join("losses.csv")).unwrap();
    assert!(losses.lines().count() > 1);
    assert!(out_dir.join("losses_histogram.csv").exists());
}

#[test]
fn missing_config_exits_with_config_error() {
    let out = weakiv(&["simulate", "--config", "/definitely/not/here.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"version": 1, "iterations": 3}"#).unwrap();
    let out = weakiv(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let text = fs::read_to_string(config("weak.json")).unwrap().replace("\"kind\": \"tsls\"", "\"kind\": \"tsls\", \"c\": 2.0");
    fs::write(&path, text).unwrap();
    let out = weakiv(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_with_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = config("weak.json");
    let mut args = vec!["simulate", "--config", cfg.to_str().unwrap(), "--out", blocker.to_str().unwrap()];
    args.extend(SMALL);
    assert_eq!(weakiv(&args).status.code(), Some(3));
}

fn ten_rows() -> (Vec<Vec<f64>>, Dataset) {
    let z: [[f64; 2]; 10] = [
        [1.0, 0.3],
        [-1.0, 1.2],
        [0.5, -0.7],
        [2.0, 0.1],
        [-0.4, -1.5],
        [1.3, 0.8],
        [-2.1, 0.2],
        [0.9, -0.3],
        [-0.6, 1.9],
        [0.2, -1.1],
    ];
    let noise = [0.3, -0.2, 0.5, -0.4, 0.1, 0.0, -0.3, 0.2, 0.4, -0.1];
    let mut rows = Vec::new();
    for (i, zi) in z.iter().enumerate() {
        let x = 0.8 * zi[0] - 0.5 * zi[1] + 0.5 * noise[9 - i];
        let y = 1.5 * x + noise[i];
        rows.push(vec![y, x, zi[0], zi[1]]);
    }
    let n = rows.len();
    let data = Dataset::new(
        DVector::from_iterator(n, rows.iter().map(|r| r[0])),
        DMatrix::from_iterator(n, 1, rows.iter().map(|r| r[1])),
        DMatrix::from_fn(n, 2, |i, j| rows[i][2 + j]),
    )
    .unwrap();
    (rows, data)
}

#[test]
fn estimate_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let (rows, data) = ten_rows();
    write_csv(&path, "y,x1,z1,z2", &rows);
    let v = stdout_json(&weakiv(&["estimate", "--data", path.to_str().unwrap(), "--estimator", "tsls"]));
    let got = v["beta_hat"][0].as_f64().unwrap();
    let want = tsls(&data).unwrap().beta_hat[0];
    assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    assert_eq!(v["n"], 10);
}

/// Two binary instruments, four observations per cell.
fn cell_rows() -> Vec<Vec<f64>> {
    let noise = [0.3, -0.2, 0.5, -0.4, 0.1, 0.7, -0.3, 0.2, 0.4, -0.1, -0.6, 0.25, 0.05, -0.45, 0.35, -0.15];
    (0..16)
        .map(|i| {
            let z1 = if i % 2 == 0 { -1.0 } else { 1.0 };
            let z2 = if (i / 2) % 2 == 0 { -1.0 } else { 1.0 };
            let x = 0.8 * z1 - 0.5 * z2 + 0.5 * noise[15 - i];
            vec![1.5 * x + noise[i], x, z1, z2]
        })
        .collect()
}

#[test]
fn estimate_recovers_beta_without_noise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exact.csv");
    let rows: Vec<Vec<f64>> = (0..12)
        .map(|i| {
            let z1 = (i % 3) as f64 - 1.0;
            let z2 = ((i * 7) % 5) as f64 - 2.0;
            let x = 0.7 * z1 + 0.4 * z2;
            vec![2.0 * x, x, z1, z2]
        })
        .collect();
    write_csv(&path, "y,x1,z1,z2", &rows);
    for est in ["tsls", "fuller"] {
        let v = stdout_json(&weakiv(&["estimate", "--data", path.to_str().unwrap(), "--estimator", est]));
        let b = v["beta_hat"][0].as_f64().unwrap();
        assert!((b - 2.0).abs() < 1e-10, "{est}: {b}");
    }
}

#[test]
fn unbiased_requires_single_instrument() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let rows = cell_rows();
    write_csv(&path, "y,x1,z1,z2", &rows);
    let out = weakiv(&["estimate", "--data", path.to_str().unwrap(), "--estimator", "unbiased"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let single: Vec<Vec<f64>> = rows.iter().map(|r| r[..3].to_vec()).collect();
    write_csv(&path, "y,x1,z1", &single);
    let n = single.len();
    let data = Dataset::new(
        DVector::from_iterator(n, single.iter().map(|r| r[0])),
        DMatrix::from_iterator(n, 1, single.iter().map(|r| r[1])),
        DMatrix::from_iterator(n, 1, single.iter().map(|r| r[2])),
    )
    .unwrap();
    let fit = ols_reduced_form(&data).unwrap();
    for (flag, conv) in [("printed", VarianceConvention::AsPrinted), ("pi", VarianceConvention::PiVariance)] {
        let v = stdout_json(&weakiv(&[
            "estimate",
            "--data",
            path.to_str().unwrap(),
            "--estimator",
            "unbiased",
            "--variance-convention",
            flag,
        ]));
        let want = unbiased_scalar(&fit, conv).unwrap().beta_hat[0];
        assert!((v["beta_hat"][0].as_f64().unwrap() - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

#[test]
fn bad_data_header_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    write_csv(&path, "y,z1,x1", &[vec![1.0, 2.0, 3.0]]);
    let out = weakiv(&["estimate", "--data", path.to_str().unwrap(), "--estimator", "tsls"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rank_deficient_instruments_exit_with_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let rows: Vec<Vec<f64>> = (0..8).map(|i| {
        let z = i as f64;
        vec![z + 1.0, 0.5 * z + (i % 2) as f64, z, 2.0 * z]
    }).collect();
    write_csv(&path, "y,x1,z1,z2", &rows);
    let out = weakiv(&["estimate", "--data", path.to_str().unwrap(), "--estimator", "tsls"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn rb_estimate_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    write_csv(&path, "y,x1,z1,z2", &cell_rows());
    let run = |seed: &str| {
        stdout_json(&weakiv(&[
            "estimate", "--data", path.to_str().unwrap(), "--estimator", "rb-tsls", "--draws", "20", "--seed", seed,
        ]))["beta_hat"][0]
            .as_f64()
            .unwrap()
    };
    assert_eq!(run("3"), run("3"));
    assert_ne!(run("3"), run("4"));
}

#[test]
fn replicate_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["replicate", "strong", "--out", dir.path().to_str().unwrap(), "--format", "json"];
    args.extend(SMALL);
    let v = stdout_json(&weakiv(&args));
    assert_eq!(v["rows"].as_array().unwrap().len(), 4);
    assert_eq!(v["iterations"], 6);
    assert!(dir.path().join("replication.json").exists());
    assert!(dir.path().join("result.json").exists());
}

#[test]
fn concentration_of_builtin_designs() {
    let weak = stdout_json(&weakiv(&["concentration", "--mode", "weak"]));
    let strong = stdout_json(&weakiv(&["concentration", "--mode", "strong"]));
    let w = weak["concentration"][0][0].as_f64().unwrap();
    let s = strong["concentration"][0][0].as_f64().unwrap();
    assert!((s / w - 1000.0).abs() < 1e-9);
    let from_file = stdout_json(&weakiv(&["concentration", "--config", config("strong.json").to_str().unwrap()]));
    assert_eq!(from_file["concentration"][0][0].as_f64().unwrap(), s);
}
