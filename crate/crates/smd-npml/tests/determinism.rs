//! Reports must be byte-stable: same config, same CSV, regardless of rerun
//! or worker count, and the summary's verdicts must match the rows.

use std::fs;

use smd_npml::harness::{
    emit_report, run_experiment, with_pool, ExperimentConfig, RunReport,
};

fn sphere_config() -> ExperimentConfig {
    serde_json::from_str(
        r#"{
            "schema": 1,
            "experiment": "sphere",
            "family": "uniform",
            "true_density": "neumann_smooth",
            "interval": [0.0, 1.0],
            "model": { "t": 2.0, "zeta": 0.1, "d": 1.6, "j": 8, "grid": 128 },
            "n_list": [60],
            "replications": 4,
            "master_seed": 99,
            "quad_nodes": 64
        }"#,
    )
    .unwrap()
}

fn emit_to_string(report: &RunReport) -> (String, String) {
    let dir = tempfile::tempdir().unwrap();
    let (csv_path, json_path) = emit_report(report, dir.path()).unwrap();
    (
        fs::read_to_string(csv_path).unwrap(),
        fs::read_to_string(json_path).unwrap(),
    )
}

#[test]
fn csv_identical_across_reruns_and_pool_widths() {
    let cfg = sphere_config();
    let baseline = with_pool(1, || run_experiment(&cfg)).unwrap();
    let rerun = with_pool(1, || run_experiment(&cfg)).unwrap();
    let wide = with_pool(4, || run_experiment(&cfg)).unwrap();

    let (csv_a, _) = emit_to_string(&baseline);
    let (csv_b, _) = emit_to_string(&rerun);
    let (csv_c, _) = emit_to_string(&wide);
    assert_eq!(csv_a, csv_b, "rerun changed the CSV");
    assert_eq!(csv_a, csv_c, "worker count changed the CSV");
}

#[test]
fn summary_verdicts_match_rows() {
    let cfg = sphere_config();
    let report = with_pool(2, || run_experiment(&cfg)).unwrap();
    let (csv_text, json_text) = emit_to_string(&report);

    let summary: serde_json::Value = serde_json::from_str(&json_text).unwrap();
    assert_eq!(summary["schema"], 1);
    assert_eq!(summary["row_count"].as_u64().unwrap() as usize, report.rows.len());
    assert_eq!(summary["passed"].as_bool().unwrap(), report.passed());

    // Recompute the sphere-residual verdict straight from the CSV: the max
    // of sphere_residual/D over converged rows must sit under 1e-4.
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = reader.headers().unwrap().clone();
    let residual_col = headers.iter().position(|h| h == "sphere_residual").unwrap();
    let converged_col = headers.iter().position(|h| h == "converged").unwrap();
    let mut worst: f64 = 0.0;
    for record in reader.records() {
        let record = record.unwrap();
        if &record[converged_col] == "true" {
            worst = worst.max(record[residual_col].parse::<f64>().unwrap());
        }
    }
    let sphere_assert = report
        .assertions
        .iter()
        .find(|a| a.name == "sphere_residual")
        .expect("sphere run reports a sphere_residual assertion");
    assert_eq!(sphere_assert.passed, worst / cfg.model.d < 1e-4);
}
