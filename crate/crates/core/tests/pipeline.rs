use std::fs;
use std::path::Path;

use wassimpute::conformal::ConformalModel;
use wassimpute::io::{attach_truth, read_dataset, read_json, write_dataset, write_truth};
use wassimpute::par::Exec;
use wassimpute::pipeline::{run_to_dir, PipelineConfig, PipelineReport, ARTIFACTS};
use wassimpute::sim::{
    derive_seed, generate_dataset, run_replication, Mechanism, ReplicationConfig, ScenarioSpec,
};

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    ARTIFACTS
        .iter()
        .map(|a| (a.to_string(), fs::read(dir.join(a)).unwrap()))
        .collect()
}

#[test]
fn dataset_round_trip_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_dataset(&ScenarioSpec::new(Mechanism::Linear, 2, 500, 3)).unwrap();
    let (csv, json, truth) = (
        tmp.path().join("d.csv"),
        tmp.path().join("d.json"),
        tmp.path().join("t.csv"),
    );
    write_dataset(&csv, &json, &data, "mg/dL").unwrap();
    write_truth(&truth, &data).unwrap();
    let mut back = read_dataset(&csv, &json).unwrap();
    assert_eq!(back, data.without_hidden_truth());
    let attached = attach_truth(&truth, &mut back).unwrap();
    assert_eq!(attached, data.missing_indices().len());
    assert_eq!(back, data);
}

#[test]
fn report_coverage_matches_simulation() {
    let spec = ScenarioSpec::new(Mechanism::NonLinear, 2, 1000, 77);
    let metrics =
        run_replication(&spec, &ReplicationConfig::default(), 0, Exec::Sequential).unwrap();
    let data = generate_dataset(&ScenarioSpec {
        seed: derive_seed(77, 0),
        ..spec
    })
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (csv, json, truth) = (
        tmp.path().join("d.csv"),
        tmp.path().join("d.json"),
        tmp.path().join("t.csv"),
    );
    write_dataset(&csv, &json, &data, "").unwrap();
    write_truth(&truth, &data).unwrap();
    let mut loaded = read_dataset(&csv, &json).unwrap();
    attach_truth(&truth, &mut loaded).unwrap();
    let cfg = PipelineConfig {
        seed: metrics.seed,
        downstream: wassimpute::pipeline::DownstreamKind::None,
        ..Default::default()
    };
    let out = tmp.path().join("run");
    run_to_dir(&loaded, &cfg, &out, &[]).unwrap();
    let report: PipelineReport = read_json(&out.join("report.json")).unwrap();
    assert_eq!(report.coverage, Some(metrics.coverage));
    assert_eq!(report.qhat, metrics.qhat);
    let model: ConformalModel = read_json(&out.join("model.json")).unwrap();
    assert_eq!(model.qhat.to_bits(), metrics.qhat.to_bits());
}

#[test]
fn reruns_are_byte_identical() {
    let planted = wassimpute::sim::PlantedBoundary {
        n_observed: 200,
        n_accurate: 100,
        n_noisy: 100,
        ..Default::default()
    };
    let data = planted.generate(4).unwrap().data.without_hidden_truth();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        seed: 12,
        ..Default::default()
    };
    run_to_dir(&data, &cfg, &tmp.path().join("a"), &[]).unwrap();
    let seq = PipelineConfig {
        exec: Exec::Sequential,
        ..cfg
    };
    run_to_dir(&data, &seq, &tmp.path().join("b"), &[]).unwrap();
    assert_eq!(
        artifacts(&tmp.path().join("a")),
        artifacts(&tmp.path().join("b"))
    );
    let report: PipelineReport = read_json(&tmp.path().join("a/report.json")).unwrap();
    assert!(report.best_metric.is_some(), "{report:?}");
}

#[test]
fn no_missing_rows() {
    let mut data =
        generate_dataset(&ScenarioSpec::new(Mechanism::NonDependent, 1, 500, 1)).unwrap();
    data.delta = vec![true; data.n()];
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        downstream: wassimpute::pipeline::DownstreamKind::None,
        ..Default::default()
    };
    let out = run_to_dir(&data, &cfg, tmp.path(), &[]).unwrap();
    assert!(out.radii.is_empty());
    let radii = fs::read_to_string(tmp.path().join("radii.csv")).unwrap();
    assert_eq!(radii.lines().count(), 1);
    let sweep = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(
        lines[1].starts_with("0.0,500,") || lines[1].starts_with("0,500,"),
        "{}",
        lines[1]
    );
}

#[test]
fn stage_errors_carry_stage_and_code() {
    let mut data =
        generate_dataset(&ScenarioSpec::new(Mechanism::NonDependent, 1, 500, 1)).unwrap();
    data.delta = vec![false; data.n()];
    data.responses = vec![None; data.n()];
    let err = wassimpute::pipeline::run(&data, &PipelineConfig::default()).unwrap_err();
    assert!(err.to_string().starts_with("stage 'propensity'"), "{err}");
    assert_eq!(err.code(), "degenerate_response");
}
