//! End-to-end runs of the `corrdetector` binary and its exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn corrdetector(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corrdetector"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn synth(dir: &Path) {
    let out = corrdetector(&["synth", "--out", "data", "--images", "9", "--seed", "4"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_then_run_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = corrdetector(&["run", "--config", "data/pipeline.toml", "--ensemble.folds", "3"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("data/run/report.txt")).unwrap();
    assert!(report.contains("Segment-level prediction"));
    assert!(report.contains("Ensemble cross-validation (3 folds"));
    assert!(dir.path().join("data/run/overlays").is_dir());
}

#[test]
fn evaluate_before_score_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = corrdetector(
        &["run", "--config", "data/pipeline.toml", "--stages", "ingest,split,ciss,train-scorer"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = corrdetector(&["evaluate", "--config", "data/pipeline.toml"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`score`"));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    for args in [
        &["ingest", "--config", "data/pipeline.toml", "--set", "grid.bogus=1"][..],
        &["ingest", "--config", "data/pipeline.toml", "--tau-s", "1.5"],
        &["ingest", "--config", "data/pipeline.toml", "--tau-i", "sometimes"],
        &["ingest", "--config", "data/missing.toml"],
        &["ingest", "--config", "data/pipeline.toml", "--n", "0"],
        &["frobnicate"],
    ] {
        let out = corrdetector(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn invalid_annotations_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    std::fs::write(
        dir.path().join("data/grid/synth_0000.json"),
        r#"{"image_id": "synth_0000", "n": 8, "corroded_cells": [[9, 1]]}"#,
    )
    .unwrap();
    let out = corrdetector(&["ingest", "--config", "data/pipeline.toml"], dir.path());
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
