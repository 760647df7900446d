#![allow(dead_code)]

use std::path::Path;
use std::time::{Duration, Instant};

use corrdetector_core::config::PipelineConfig;
use corrdetector_core::pipeline::{read_report, run_pipeline};
use corrdetector_core::report::EvaluationReport;
use corrdetector_core::synth::{pipeline_template, synth_generate, write_dataset, PatchSpec, SyntheticSpec};

/// Times `body`, prints one PASS/FAIL line and panics on failure or overrun.
pub fn criterion(id: u32, name: &str, limit: Duration, body: impl FnOnce() -> Result<String, String>) {
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(body));
    let elapsed = start.elapsed();
    let result = match outcome {
        Ok(Ok(detail)) if elapsed <= limit => Ok(detail),
        Ok(Ok(detail)) => Err(format!("{detail}; took {elapsed:?}, limit {limit:?}")),
        Ok(Err(e)) => Err(e),
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    match result {
        Ok(detail) => println!("PASS [{id:>2}] {name}: {detail} ({elapsed:.2?})"),
        Err(e) => {
            println!("FAIL [{id:>2}] {name}: {e} ({elapsed:.2?})");
            panic!("criterion {id} failed: {e}");
        }
    }
}

/// Tower images with rust on the lattice and rust distractors away from it.
pub fn suppression_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        images: 12,
        patches: PatchSpec {
            on_structure: (2, 4),
            off_structure: (3, 5),
            size_px: (4, 7),
        },
        seed,
        ..SyntheticSpec::default()
    }
}

/// Writes the dataset and its pipeline configuration into `dir`, runs every
/// stage and returns the report.
pub fn run_synthetic(dir: &Path, spec: &SyntheticSpec, overrides: &[&str]) -> EvaluationReport {
    let images = synth_generate(spec).expect("synthetic data");
    write_dataset(&images, dir).expect("write dataset");
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let cfg = PipelineConfig::from_toml(&pipeline_template(spec), dir, &overrides).expect("config");
    let out = cfg.out.clone();
    run_pipeline(cfg, &[]).expect("pipeline run");
    read_report(&out).expect("report")
}
