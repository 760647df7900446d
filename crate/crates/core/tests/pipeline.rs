//! Staged runs over a run directory: prerequisites, locking and overrides.

use std::path::Path;

use corrdetector_core::config::PipelineConfig;
use corrdetector_core::pipeline::{Pipeline, RunManifest, Stage};
use corrdetector_core::synth::{pipeline_template, synth_generate, write_dataset, SyntheticSpec};
use corrdetector_core::Error;

fn pipeline(dir: &Path, overrides: &[&str]) -> Pipeline {
    let spec = SyntheticSpec { images: 9, seed: 3, ..SyntheticSpec::default() };
    write_dataset(&synth_generate(&spec).unwrap(), dir).unwrap();
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    Pipeline::new(PipelineConfig::from_toml(&pipeline_template(&spec), dir, &overrides).unwrap()).unwrap()
}

fn missing_stage(e: Error) -> String {
    match e {
        Error::MissingPrerequisite { stage, .. } => stage,
        other => panic!("expected a missing prerequisite, got {other}"),
    }
}

#[test]
fn stages_name_their_missing_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path(), &[]);
    assert_eq!(missing_stage(p.run(&[Stage::Split]).unwrap_err()), "ingest");
    p.run(&[Stage::Ingest, Stage::Split, Stage::Ciss, Stage::TrainScorer]).unwrap();
    let e = p.run(&[Stage::Evaluate]).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert_eq!(missing_stage(e), "score");
    p.run(&[Stage::Score]).unwrap();
    assert_eq!(missing_stage(p.run(&[Stage::Erc]).unwrap_err()), "detect-baseline");
    p.run(&[Stage::DetectBaseline, Stage::Erc]).unwrap();
    assert_eq!(missing_stage(p.run(&[Stage::Decide]).unwrap_err()), "train-ensemble");
}

#[test]
fn stages_run_in_dependency_order_and_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path(), &["ensemble.folds=3"]);
    let mut stages = p.default_stages();
    stages.reverse();
    p.run(&stages).unwrap();
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(p.path("manifest.json")).unwrap()).unwrap();
    for s in p.default_stages() {
        assert!(manifest.completed_stages.iter().any(|c| c == s.name()), "{s} not recorded");
    }
    assert!(p.path("report.txt").exists());
    assert!(!p.path("run.lock").exists());
}

#[test]
fn a_held_lock_blocks_a_second_writer() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path(), &[]);
    std::fs::create_dir_all(p.run_dir()).unwrap();
    std::fs::write(p.path("run.lock"), "").unwrap();
    let e = p.run(&[Stage::Ingest]).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(!p.path("dataset.json").exists());
}

#[test]
fn stage_list_parsing() {
    assert_eq!(Stage::parse_list("score, ingest").unwrap(), [Stage::Score, Stage::Ingest]);
    assert!(Stage::parse_list("ingest,bogus").is_err());
    for s in Stage::ALL {
        assert_eq!(s.name().parse::<Stage>().unwrap(), s);
    }
}

#[test]
fn stage_seeds_derive_from_the_overridden_run_seed() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path(), &["seed=99"]);
    p.run(&[Stage::Ingest]).unwrap();
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(p.path("manifest.json")).unwrap()).unwrap();
    let seeds: Vec<_> = ["split", "ciss", "scorer", "ensemble"].iter().map(|k| manifest.seeds[*k]).collect();
    assert_eq!(seeds, [99, 100, 101, 102]);
    assert_eq!(manifest.completed_stages, ["ingest"]);
}
