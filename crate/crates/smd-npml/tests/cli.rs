//! End-to-end runs of the command-line binary.

use std::fs;
use std::path::Path;
use std::process::Command;

use smd_npml::simulate::{stream_rng, uniform_batch, StreamPurpose};

const BIN: &str = env!("CARGO_BIN_EXE_smd-npml");

fn write_quantile_data(path: &Path, n: usize) {
    let lines: Vec<String> = (1..=n)
        .map(|i| format!("{:.12}", i as f64 / (n + 1) as f64))
        .collect();
    fs::write(path, lines.join("\n")).unwrap();
}

#[test]
fn fit_npml_reports_a_converged_density() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("points.txt");
    let model = dir.path().join("model.json");
    let out = dir.path().join("fit.json");
    write_quantile_data(&data, 80);
    fs::write(
        &model,
        r#"{ "schema": 1, "t": 2.0, "zeta": 0.1, "d": 1.6, "j": 8, "grid": 128 }"#,
    )
    .unwrap();

    let status = Command::new(BIN)
        .args(["fit-npml", "--data"])
        .arg(&data)
        .arg("--model")
        .arg(&model)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());

    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(fit["converged"], true);
    assert_eq!(fit["coefficients"].as_array().unwrap().len(), 9);
    let sphere = fit["sphere_residual"].as_f64().unwrap();
    assert!(sphere.abs() < 1e-4 * 1.6, "sphere residual {sphere}");
    let norm = fit["norm_t"].as_f64().unwrap();
    assert!((norm - 1.6).abs() < 1e-3, "fit norm {norm}");
}

#[test]
fn estimate_smd_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("points.txt");
    let config = dir.path().join("estimate.json");
    let out = dir.path().join("estimate_out.json");
    let mut rng = stream_rng(11, 0, 2, StreamPurpose::Data);
    let lines: Vec<String> = uniform_batch(&mut rng, 60)
        .into_iter()
        .map(|x| format!("{x:.12}"))
        .collect();
    fs::write(&data, lines.join("\n")).unwrap();
    let config_text = format!(
        r#"{{
            "schema": 1,
            "family": "exp_tilt",
            "model": {{ "t": 1.0, "zeta": 0.1, "d": 1.6, "j": 8, "grid": 128 }},
            "data": {:?},
            "k": 4000,
            "seed": 7,
            "quad_nodes": 128
        }}"#,
        data.to_str().unwrap()
    );
    fs::write(&config, config_text).unwrap();

    let output = Command::new(BIN)
        .args(["estimate-smd", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}\nout: {}",
        String::from_utf8_lossy(&output.stderr),
        fs::read_to_string(&out).unwrap_or_default()
    );

    let est: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let theta = est["theta_hat"].as_array().unwrap();
    assert_eq!(theta.len(), 2);
    // The quadratic-tilt family has a near-flat objective valley, so the
    // components are only pinned to the search box here; the distance value
    // and the run diagnostics are the meaningful checks at this scale.
    for coord in theta {
        let v = coord.as_f64().unwrap();
        assert!(v.abs() <= 3.0, "tilt estimate {v} escaped the search box");
    }
    assert!(est["objective_value"].as_f64().unwrap() < 0.05);
    assert_eq!(est["diagnostics"]["k"].as_u64().unwrap(), 4000);
    assert_eq!(est["diagnostics"]["converged"], true);
    assert_eq!(est["diagnostics"]["boundary"], false);
    let data_fit_residual = est["diagnostics"]["fit"]["sphere_residual"].as_f64().unwrap();
    assert!(data_fit_residual < 1e-4, "data fit off the sphere: {data_fit_residual}");
}

#[test]
fn mc_sphere_passes_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sphere.json");
    fs::write(
        &config,
        r#"{
            "schema": 1,
            "experiment": "sphere",
            "family": "uniform",
            "true_density": "neumann_smooth",
            "model": { "t": 2.0, "zeta": 0.1, "d": 1.6, "j": 8, "grid": 128 },
            "n_list": [60],
            "replications": 5,
            "master_seed": 13,
            "quad_nodes": 64
        }"#,
    )
    .unwrap();

    let output = Command::new(BIN)
        .args(["mc-sphere", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .arg("--threads")
        .arg("1")
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("[PASS]"));
    assert!(!stdout.contains("[FAIL]"));
    assert!(dir.path().join("sphere.csv").exists());
    assert!(dir.path().join("sphere_summary.json").exists());
}

#[test]
fn mismatched_experiment_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sphere.json");
    fs::write(
        &config,
        r#"{
            "schema": 1,
            "experiment": "sphere",
            "family": "uniform",
            "true_density": "neumann_smooth",
            "model": { "t": 2.0, "zeta": 0.1, "d": 1.6 },
            "n_list": [60],
            "replications": 5,
            "master_seed": 13
        }"#,
    )
    .unwrap();
    let output = Command::new(BIN)
        .args(["mc-rates", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("error:"));
}

