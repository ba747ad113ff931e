use std::fs;

use lifelong_core::demo::demo_fixtures;
use lifelong_core::orchestrator::{emit_reports, run_fixtures, RepoFixture, REPORT_FILES};
use lifelong_core::{DatasetStrategy, PipelineError, RunConfig};

fn two_repos() -> Vec<RepoFixture> {
    let mut f = demo_fixtures();
    f.truncate(2);
    f
}

#[test]
fn two_repository_run_has_triangular_matrix() {
    let cfg = RunConfig { strategy: DatasetStrategy::MergeAll, ewc_lambda: 0.5, ..RunConfig::default() };
    let report = run_fixtures(&cfg, two_repos()).unwrap();
    assert_eq!(report.order.len(), 2);
    assert_eq!(report.matrix.rows().iter().map(Vec::len).collect::<Vec<_>>(), [1, 2]);
    assert_eq!(report.epochs.len(), 2);
    assert!(report.metrics.is_some());
    assert!(report.checkpoint.fisher.is_some() && report.checkpoint.anchor.is_some());
    assert_eq!(report.checkpoint.history, report.order);
}

#[test]
fn single_repository_has_no_metrics() {
    let mut f = demo_fixtures();
    f.truncate(1);
    let report = run_fixtures(&RunConfig::default(), f).unwrap();
    assert!(report.metrics.is_none());
    let dir = tempfile::tempdir().unwrap();
    emit_reports(&report, dir.path()).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["metrics"].is_null());
}

#[test]
fn without_proving_no_proofs_are_recorded() {
    let cfg = RunConfig { prove_sorries: false, ..RunConfig::default() };
    let report = run_fixtures(&cfg, two_repos()).unwrap();
    assert!(report.proofs.is_empty());
    assert!(report.database.repositories.iter().all(|r| r.theorems.sorry_proven.is_empty()));
    let dir = tempfile::tempdir().unwrap();
    let written = emit_reports(&report, dir.path()).unwrap();
    assert_eq!(written.len(), REPORT_FILES.len());
    assert_eq!(fs::read_to_string(dir.path().join("proofs.json")).unwrap().trim(), "[]");
}

#[test]
fn duplicate_fixture_is_rejected() {
    let mut f = two_repos();
    f.push(f[0].clone());
    assert!(matches!(run_fixtures(&RunConfig::default(), f), Err(PipelineError::Stage { .. })));
}

#[test]
fn unwritable_output_is_an_io_failure() {
    let cfg = RunConfig { prove_sorries: false, ..RunConfig::default() };
    let report = run_fixtures(&cfg, two_repos()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let err = emit_reports(&report, &blocker.join("out")).unwrap_err();
    assert!(matches!(err, PipelineError::IoFailure { .. }), "{err}");
}
