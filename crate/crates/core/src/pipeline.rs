//! Staged pipeline over a run directory.
//!
//! Each stage reads the artifacts of earlier stages from the run directory
//! and writes its own. A stage whose inputs are missing fails with
//! [`Error::MissingPrerequisite`] naming the stage to run first. Every stage
//! is deterministic given the configuration and its seeds.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotation::{
    build_label_matrix, image_id_from_path, parse_grid_annotation, save_png, select_object_polygon,
    split_dataset, DatasetCounts, DatasetSplit, GridAnnotation, LabelMeDocument, ObjectAnnotation,
};
use crate::ciss::{ciss, read_manifest, train_validation_split, write_crops, write_manifest, ImageDir, ImageSource, TrainingSet};
use crate::config::{DetectorKind, PipelineConfig, ScorerKind};
use crate::detection::{load_external_masks, BaselineDetector, DetectedObject, MaskProvider, TargetColorSpec};
use crate::erc::{
    erc_features, evaluate_ensemble, read_feature_file, train_ensemble, write_feature_file, CrossValidation,
    EnsembleFeatureSet,
};
use crate::error::{Error, Result};
use crate::geometry::{BinaryGridMatrix, GridSpec, ImageDescriptor, PolygonMask, SegmentIndex};
use crate::learn::{Model, TrainParams};
use crate::metrics::{
    average_precision, confusion_metrics, derive_tau_i, ilp_decide, iop_decide, iou_bbox, iou_mask,
    precision_at_iou, ConfusionCounts, ImageDecision, ObjectDecision,
};
use crate::render::render_overlay;
use crate::report::{EvaluationReport, IouTable, ScoreRow};
use crate::scoring::{
    load_external_scores, sample_features, score_image, train_baseline_on_features, BaselineHyperparams,
    BaselineScorer, BaselineScorerParams, ColorRuleScorer, ImageScoreResult, ScoreFile, SegmentScorer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Split,
    Ciss,
    TrainScorer,
    ImportScores,
    Score,
    ImportMasks,
    DetectBaseline,
    Erc,
    TrainEnsemble,
    Decide,
    Evaluate,
    Render,
}

impl Stage {
    /// Canonical execution order.
    pub const ALL: [Stage; 13] = [
        Stage::Ingest,
        Stage::Split,
        Stage::Ciss,
        Stage::TrainScorer,
        Stage::ImportScores,
        Stage::Score,
        Stage::ImportMasks,
        Stage::DetectBaseline,
        Stage::Erc,
        Stage::TrainEnsemble,
        Stage::Decide,
        Stage::Evaluate,
        Stage::Render,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::Ciss => "ciss",
            Stage::TrainScorer => "train-scorer",
            Stage::ImportScores => "import-scores",
            Stage::Score => "score",
            Stage::ImportMasks => "import-masks",
            Stage::DetectBaseline => "detect-baseline",
            Stage::Erc => "erc",
            Stage::TrainEnsemble => "train-ensemble",
            Stage::Decide => "decide",
            Stage::Evaluate => "evaluate",
            Stage::Render => "render",
        }
    }

    /// Bumped whenever a stage's artifact format or semantics change.
    pub fn version(&self) -> u32 {
        1
    }

    /// Parses a comma-separated stage list.
    pub fn parse_list(list: &str) -> Result<Vec<Stage>> {
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(Stage::from_str)
            .collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Artifact file names, relative to the run directory.
pub mod artifacts {
    pub const DATASET: &str = "dataset.json";
    pub const SPLIT: &str = "split.json";
    pub const CISS_SAMPLES: &str = "ciss/samples.csv";
    pub const CISS_SUMMARY: &str = "ciss/summary.json";
    pub const CISS_CROPS: &str = "ciss/crops";
    pub const SCORER_PARAMS: &str = "scorer/params.json";
    pub const SCORER_TRAINING: &str = "scorer/training.json";
    pub const SCORES: &str = "scores.json";
    pub const DETECTIONS: &str = "detections.json";
    pub const FEATURES: &str = "erc/features.csv";
    pub const CROSS_VALIDATION: &str = "ensemble/cross_validation.json";
    pub const DECISIONS: &str = "decisions.json";
    pub const REPORT_TEXT: &str = "report.txt";
    pub const REPORT_JSON: &str = "report.json";
    pub const OVERLAYS: &str = "overlays";
    pub const MANIFEST: &str = "manifest.json";
    pub const LOCK: &str = "run.lock";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub label: String,
    pub mask: PolygonMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub corroded_cells: Vec<[u32; 2]>,
    pub object: Option<ObjectRecord>,
}

/// Output of `ingest`: validated annotations of every image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestedDataset {
    pub grid: GridSpec,
    pub images: Vec<ImageRecord>,
}

impl IngestedDataset {
    pub fn ids(&self) -> Vec<String> {
        self.images.iter().map(|r| r.image_id.clone()).collect()
    }

    fn record(&self, id: &str) -> Result<&ImageRecord> {
        self.images
            .iter()
            .find(|r| r.image_id == id)
            .ok_or_else(|| Error::Validation(format!("image `{id}` is not in the ingested dataset")))
    }

    pub fn annotation(&self, id: &str) -> Result<GridAnnotation> {
        let r = self.record(id)?;
        GridAnnotation::new(id, self.grid.n, r.corroded_cells.iter().map(|c| (c[0], c[1])))
    }

    pub fn truth(&self, id: &str) -> Result<BinaryGridMatrix> {
        Ok(build_label_matrix(&self.annotation(id)?))
    }

    pub fn object(&self, id: &str) -> Result<Option<ObjectAnnotation>> {
        match &self.record(id)?.object {
            Some(o) => Ok(Some(ObjectAnnotation::new(
                id,
                self.grid.image_width,
                self.grid.image_height,
                o.label.clone(),
                o.mask.clone(),
            )?)),
            None => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CissSummary {
    pub seed: u64,
    pub positives: usize,
    pub negatives_selected: usize,
    pub negatives_available: usize,
    pub imbalanced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerTraining {
    pub losses: Vec<f64>,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub detection: Option<DetectedObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub source: String,
    pub images: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDecisionRecord {
    pub image_id: String,
    /// Scorer segment decisions, row-major.
    pub slp: Vec<u8>,
    pub conf_c: f64,
    pub ilp: ImageDecision,
    /// Primary ensemble segment decisions (held-out predictions), row-major.
    pub ensemble: Vec<u8>,
    pub ensemble_conf_c: f64,
    pub ensemble_ilp: ImageDecision,
    pub iop: ObjectDecision,
    pub conf_o: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionsFile {
    pub tau_s: f64,
    pub tau_i: f64,
    pub tau_i_derived: bool,
    pub tau_o: f64,
    pub ensemble_model: String,
    pub images: Vec<ImageDecisionRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub stage_versions: BTreeMap<String, u32>,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    pub completed_stages: Vec<String>,
}

/// Exclusive ownership of a run directory for the lifetime of the value.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(artifacts::LOCK);
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                Error::Config(format!(
                    "cannot lock run directory ({}: {e}); another run may be active, \
                     otherwise delete the lock file",
                    path.display()
                ))
            })?;
        Ok(Self(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Files directly inside `dir` with one of `exts`, sorted by name.
fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if path.is_file() && exts.contains(&ext) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// A configured run over one run directory.
pub struct Pipeline {
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn run_dir(&self) -> &Path {
        &self.config.out
    }

    pub fn path(&self, artifact: &str) -> PathBuf {
        self.config.out.join(artifact)
    }

    /// Full stage list for the configured scorer and detector.
    pub fn default_stages(&self) -> Vec<Stage> {
        let mut stages = vec![Stage::Ingest, Stage::Split, Stage::Ciss];
        match self.config.scorer.kind {
            ScorerKind::Baseline => stages.extend([Stage::TrainScorer, Stage::Score]),
            ScorerKind::ColorRule => stages.push(Stage::Score),
            ScorerKind::External => stages.push(Stage::ImportScores),
        }
        stages.push(match self.config.detector.kind {
            DetectorKind::Baseline => Stage::DetectBaseline,
            DetectorKind::External => Stage::ImportMasks,
        });
        stages.extend([Stage::Erc, Stage::TrainEnsemble, Stage::Decide, Stage::Evaluate, Stage::Render]);
        stages
    }

    /// Runs `stages` in canonical order, updating the run manifest after each.
    pub fn run(&self, stages: &[Stage]) -> Result<()> {
        let mut ordered = stages.to_vec();
        ordered.sort();
        ordered.dedup();
        fs::create_dir_all(self.run_dir()).map_err(|e| Error::io(self.run_dir(), e))?;
        let _lock = RunLock::acquire(self.run_dir())?;
        let inputs = self.hash_inputs()?;
        for stage in ordered {
            log::info!("stage {stage}");
            self.run_stage(stage)?;
            self.record_stage(stage, &inputs)?;
        }
        Ok(())
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Split => self.split(),
            Stage::Ciss => self.ciss(),
            Stage::TrainScorer => self.train_scorer(),
            Stage::ImportScores => self.import_scores(),
            Stage::Score => self.score(),
            Stage::ImportMasks => self.import_masks(),
            Stage::DetectBaseline => self.detect_baseline(),
            Stage::Erc => self.erc(),
            Stage::TrainEnsemble => self.train_ensemble(),
            Stage::Decide => self.decide(),
            Stage::Evaluate => self.evaluate(),
            Stage::Render => self.render(),
        }
    }

    fn hash_inputs(&self) -> Result<BTreeMap<String, String>> {
        let d = &self.config.dataset;
        let mut files = Vec::new();
        for dir in [Some(&d.images), Some(&d.grid_annotations), d.object_annotations.as_ref(), d.external_masks.as_ref()]
            .into_iter()
            .flatten()
        {
            if dir.is_dir() {
                files.extend(list_files(dir, &["png", "ppm", "json"])?);
            }
        }
        if let Some(f) = &d.external_scores {
            if f.is_file() {
                files.push(f.clone());
            }
        }
        files
            .into_iter()
            .map(|f| Ok((f.display().to_string(), sha256_file(&f)?)))
            .collect()
    }

    fn record_stage(&self, stage: Stage, inputs: &BTreeMap<String, String>) -> Result<()> {
        let path = self.path(artifacts::MANIFEST);
        let mut manifest: RunManifest = if path.exists() {
            serde_json::from_str(&read_text(&path)?).map_err(|e| Error::parse(path.display().to_string(), e))?
        } else {
            RunManifest::default()
        };
        let seeds = self.config.stage_seeds();
        manifest.config_sha256 = self.config.hash();
        manifest.seeds = BTreeMap::from([
            ("split".to_string(), seeds.split),
            ("ciss".to_string(), seeds.ciss),
            ("scorer".to_string(), seeds.scorer),
            ("ensemble".to_string(), seeds.ensemble),
        ]);
        manifest.inputs = inputs.clone();
        manifest.stage_versions.insert(stage.name().to_string(), stage.version());
        if !manifest.completed_stages.iter().any(|s| s == stage.name()) {
            manifest.completed_stages.push(stage.name().to_string());
        }
        self.write_json(artifacts::MANIFEST, &manifest)
    }

    fn write_json<T: Serialize>(&self, artifact: &str, value: &T) -> Result<()> {
        self.write_text(artifact, &serde_json::to_string_pretty(value).expect("artifact serializes"))
    }

    fn write_text(&self, artifact: &str, text: &str) -> Result<()> {
        let path = self.path(artifact);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn require(&self, artifact: &str, stage: &str) -> Result<PathBuf> {
        let path = self.path(artifact);
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::missing(
                stage,
                format!("{} not found; run `{stage}` first", path.display()),
            ))
        }
    }

    fn load<T: DeserializeOwned>(&self, artifact: &str, stage: &str) -> Result<T> {
        let path = self.require(artifact, stage)?;
        serde_json::from_str(&read_text(&path)?).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    fn dataset(&self) -> Result<IngestedDataset> {
        let ds: IngestedDataset = self.load(artifacts::DATASET, "ingest")?;
        if ds.grid.n != self.config.grid.n {
            return Err(Error::Config(format!(
                "grid.n is {} but the dataset was ingested with n={}; rerun `ingest`",
                self.config.grid.n, ds.grid.n
            )));
        }
        Ok(ds)
    }

    fn split_ids(&self) -> Result<DatasetSplit> {
        self.load(artifacts::SPLIT, "split")
    }

    fn image_source(&self) -> ImageDir {
        ImageDir {
            dir: self.config.dataset.images.clone(),
        }
    }

    fn ingest(&self) -> Result<()> {
        let d = &self.config.dataset;
        for (name, dir) in [("dataset.images", &d.images), ("dataset.grid_annotations", &d.grid_annotations)] {
            if !dir.is_dir() {
                return Err(Error::Config(format!("{name}: {} is not a directory", dir.display())));
            }
        }
        let n = self.config.grid.n;
        let mut annotations = Vec::new();
        for file in list_files(&d.grid_annotations, &["json"])? {
            let ann = parse_grid_annotation(&read_text(&file)?, Some(n))
                .map_err(|e| Error::Validation(format!("{}: {e}", file.display())))?;
            annotations.push(ann);
        }
        if annotations.is_empty() {
            return Err(Error::Validation(format!(
                "no grid annotations in {}",
                d.grid_annotations.display()
            )));
        }
        annotations.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if let Some(w) = annotations.windows(2).find(|w| w[0].image_id == w[1].image_id) {
            return Err(Error::Validation(format!("duplicate grid annotation for `{}`", w[0].image_id)));
        }
        let mut dims = None;
        for ann in &annotations {
            let file = ["png", "ppm"]
                .iter()
                .map(|ext| d.images.join(format!("{}.{ext}", ann.image_id)))
                .find(|p| p.exists())
                .ok_or_else(|| Error::Validation(format!("no image file for `{}`", ann.image_id)))?;
            let wh = image::image_dimensions(&file).map_err(|source| Error::Image { path: file.clone(), source })?;
            ImageDescriptor::new(ann.image_id.clone(), wh.0, wh.1)?;
            match dims {
                None => dims = Some(wh),
                Some(prev) if prev != wh => {
                    return Err(Error::Validation(format!(
                        "`{}` is {}x{} but earlier images are {}x{}",
                        ann.image_id, wh.0, wh.1, prev.0, prev.1
                    )))
                }
                _ => {}
            }
        }
        let (w, h) = dims.expect("at least one image");
        let grid = GridSpec::with_policy(w, h, n, self.config.grid.remainder)?;
        let annotated: std::collections::BTreeSet<_> = annotations.iter().map(|a| a.image_id.as_str()).collect();
        for f in list_files(&d.images, &["png", "ppm"])? {
            let id = image_id_from_path(&f.display().to_string());
            if !annotated.contains(id.as_str()) {
                log::warn!("image `{id}` has no grid annotation and is ignored");
            }
        }
        let mut images = Vec::with_capacity(annotations.len());
        for ann in annotations {
            let object = match &d.object_annotations {
                Some(dir) => {
                    let file = dir.join(format!("{}.json", ann.image_id));
                    if file.exists() {
                        let doc = LabelMeDocument::parse(&read_text(&file)?)
                            .map_err(|e| Error::Validation(format!("{}: {e}", file.display())))?;
                        if (doc.image_width, doc.image_height) != (w, h) {
                            return Err(Error::Validation(format!(
                                "{}: annotation is for a {}x{} image, expected {w}x{h}",
                                file.display(),
                                doc.image_width,
                                doc.image_height
                            )));
                        }
                        let (label, mask) = select_object_polygon(&doc, d.target_label.as_deref())
                            .map_err(|e| Error::Validation(format!("{}: {e}", file.display())))?;
                        let obj = ObjectAnnotation::new(ann.image_id.clone(), w, h, label, mask)?;
                        Some(ObjectRecord {
                            label: obj.label,
                            mask: obj.mask,
                        })
                    } else {
                        None
                    }
                }
                None => None,
            };
            images.push(ImageRecord {
                corroded_cells: ann.corroded_cells.iter().map(|c| [c.x, c.y]).collect(),
                image_id: ann.image_id,
                object,
            });
        }
        log::info!("ingested {} images ({w}x{h}, n={n})", images.len());
        self.write_json(artifacts::DATASET, &IngestedDataset { grid, images })
    }

    fn split(&self) -> Result<()> {
        let ds = self.dataset()?;
        let ids = ds.ids();
        let k = self.config.split.train_count(ids.len());
        let split = split_dataset(&ids, k, self.config.stage_seeds().split)?;
        let counts = DatasetCounts::new(ids.len(), k, &ds.grid);
        log::info!(
            "split {} images: {} train ({} segments), {} test ({} segments)",
            ids.len(),
            split.train_ids.len(),
            counts.train_segments,
            split.test_ids.len(),
            counts.test_segments
        );
        self.write_json(artifacts::SPLIT, &split)
    }

    fn ciss(&self) -> Result<()> {
        let ds = self.dataset()?;
        let split = self.split_ids()?;
        let anns = split.train_ids.iter().map(|id| ds.annotation(id)).collect::<Result<Vec<_>>>()?;
        let ts: TrainingSet = ciss(&anns, &ds.grid, self.config.stage_seeds().ciss)?;
        write_manifest(&ts.samples, &self.prepare(artifacts::CISS_SAMPLES)?)?;
        if self.config.ciss.write_crops {
            write_crops(&ts.samples, &ds.grid, &self.image_source(), &self.path(artifacts::CISS_CROPS))?;
        }
        log::info!("balanced set: {} positives, {} negatives", ts.n_pos, ts.n_neg_selected);
        self.write_json(
            artifacts::CISS_SUMMARY,
            &CissSummary {
                seed: ts.seed,
                positives: ts.n_pos,
                negatives_selected: ts.n_neg_selected,
                negatives_available: ts.n_neg_available,
                imbalanced: ts.is_imbalanced(),
            },
        )
    }

    /// Path of an artifact with its parent directory created.
    fn prepare(&self, artifact: &str) -> Result<PathBuf> {
        let path = self.path(artifact);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(path)
    }

    fn train_scorer(&self) -> Result<()> {
        let sc = &self.config.scorer;
        if sc.kind != ScorerKind::Baseline {
            log::info!("scorer.kind is not `baseline`; nothing to train");
            return Ok(());
        }
        let ds = self.dataset()?;
        let samples = read_manifest(&self.require(artifacts::CISS_SAMPLES, "ciss")?)?;
        let seed = self.config.stage_seeds().scorer;
        let v = self.config.ciss.validation_fraction;
        let (train, validation) = if v > 0.0 {
            let ts = TrainingSet {
                n_pos: samples.iter().filter(|s| s.label).count(),
                n_neg_selected: samples.iter().filter(|s| !s.label).count(),
                n_neg_available: 0,
                samples,
                seed,
            };
            train_validation_split(&ts, 1.0 - v, seed)?
        } else {
            (samples, Vec::new())
        };
        let source = self.image_source();
        let (xs, ys) = sample_features(&train, &ds.grid, &source)?;
        let hyper = BaselineHyperparams {
            architecture: sc.architecture,
            train: TrainParams {
                learning_rate: sc.learning_rate,
                epochs: sc.epochs,
                batch_size: sc.batch_size,
                seed,
            },
        };
        let (params, report) = train_baseline_on_features(&xs, &ys, ds.grid.seg_width, ds.grid.seg_height, &hyper)?;
        let validation_accuracy = if validation.is_empty() {
            None
        } else {
            let (vx, vy) = sample_features(&validation, &ds.grid, &source)?;
            Some(accuracy(&params.model, &vx, &vy)?)
        };
        self.write_text(artifacts::SCORER_PARAMS, &params.to_json())?;
        self.write_json(
            artifacts::SCORER_TRAINING,
            &ScorerTraining {
                losses: report.losses,
                train_samples: train.len(),
                validation_samples: validation.len(),
                validation_accuracy,
            },
        )
    }

    fn score(&self) -> Result<()> {
        let ds = self.dataset()?;
        let split = self.split_ids()?;
        let sc = &self.config.scorer;
        let scorer: Box<dyn SegmentScorer> = match sc.kind {
            ScorerKind::Baseline => {
                let path = self.require(artifacts::SCORER_PARAMS, "train-scorer")?;
                Box::new(BaselineScorer {
                    params: BaselineScorerParams::from_json(&read_text(&path)?)?,
                })
            }
            ScorerKind::ColorRule => Box::new(ColorRuleScorer {
                range: sc.color,
                min_pixels: sc.min_pixels,
            }),
            ScorerKind::External => {
                return Err(Error::Config(
                    "scorer.kind = external: use `import-scores` instead of `score`".into(),
                ))
            }
        };
        let source = self.image_source();
        let tau_s = self.config.decision.tau_s;
        let results = split
            .test_ids
            .iter()
            .map(|id| score_image(scorer.as_ref(), id, &source.load(id)?, &ds.grid, tau_s))
            .collect::<Result<Vec<_>>>()?;
        self.write_text(artifacts::SCORES, &ScoreFile::from_results(&results, Some(tau_s)).to_json())
    }

    fn import_scores(&self) -> Result<()> {
        let ds = self.dataset()?;
        let split = self.split_ids()?;
        let path = self.config.dataset.external_scores.as_ref().ok_or_else(|| {
            Error::Config("`import-scores` needs dataset.external_scores".into())
        })?;
        let doc = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scores = load_external_scores(&doc, ds.grid.n, Some(&split.test_ids))?;
        let by_id: BTreeMap<_, _> = scores.into_iter().collect();
        let results: Vec<_> = split
            .test_ids
            .iter()
            .map(|id| ImageScoreResult::from_confidences(id.clone(), by_id[id].clone(), self.config.decision.tau_s))
            .collect();
        self.write_text(artifacts::SCORES, &ScoreFile::from_results(&results, None).to_json())
    }

    /// Scorer results of the test images at the configured `tau_s`.
    fn score_results(&self, ds: &IngestedDataset, split: &DatasetSplit) -> Result<Vec<ImageScoreResult>> {
        let path = self.require(artifacts::SCORES, "score")?;
        let scores = load_external_scores(&read_text(&path)?, ds.grid.n, Some(&split.test_ids))?;
        let mut by_id: BTreeMap<_, _> = scores.into_iter().collect();
        Ok(split
            .test_ids
            .iter()
            .map(|id| {
                let cs = by_id.remove(id).expect("presence checked");
                ImageScoreResult::from_confidences(id.clone(), cs, self.config.decision.tau_s)
            })
            .collect())
    }

    fn write_detections(&self, source: &str, ids: &[String], dets: BTreeMap<String, DetectedObject>) -> Result<()> {
        let mut dets = dets;
        let images = ids
            .iter()
            .map(|id| DetectionRecord {
                image_id: id.clone(),
                detection: dets.remove(id),
            })
            .collect();
        self.write_json(
            artifacts::DETECTIONS,
            &DetectionsFile {
                source: source.to_string(),
                images,
            },
        )
    }

    fn detect_baseline(&self) -> Result<()> {
        let _ = self.dataset()?;
        let split = self.split_ids()?;
        let c = &self.config.detector;
        let detector = BaselineDetector {
            spec: TargetColorSpec {
                color: c.color,
                tolerance: c.tolerance,
                label: self.config.dataset.target_label.clone().unwrap_or_else(|| "object".into()),
            },
        };
        let source = self.image_source();
        let mut dets = BTreeMap::new();
        for id in &split.test_ids {
            if let Some(d) = detector.detect(id, &source.load(id)?)? {
                dets.insert(id.clone(), d);
            } else {
                log::warn!("{id}: no object detected");
            }
        }
        self.write_detections("baseline", &split.test_ids, dets)
    }

    fn import_masks(&self) -> Result<()> {
        let ds = self.dataset()?;
        let split = self.split_ids()?;
        let dir = self.config.dataset.external_masks.as_ref().ok_or_else(|| {
            Error::Config("`import-masks` needs dataset.external_masks".into())
        })?;
        let docs = list_files(dir, &["json"])?
            .iter()
            .map(|f| read_text(f))
            .collect::<Result<Vec<_>>>()?;
        let all = load_external_masks(docs.iter().map(String::as_str), self.config.dataset.target_label.as_deref())?;
        let mut dets = BTreeMap::new();
        for (id, d) in all {
            if (d.image_width, d.image_height) != (ds.grid.image_width, ds.grid.image_height) {
                return Err(Error::Validation(format!(
                    "{id}: predicted mask is for a {}x{} image",
                    d.image_width, d.image_height
                )));
            }
            if split.test_ids.contains(&id) {
                dets.insert(id, d);
            }
        }
        self.write_detections("external", &split.test_ids, dets)
    }

    fn detections(&self) -> Result<BTreeMap<String, DetectedObject>> {
        let file: DetectionsFile = self.load(artifacts::DETECTIONS, "detect-baseline").map_err(|e| match e {
            Error::MissingPrerequisite { detail, .. } => Error::missing(
                "detect-baseline",
                format!("{detail} (or `import-masks` for external masks)"),
            ),
            e => e,
        })?;
        Ok(file
            .images
            .into_iter()
            .filter_map(|r| r.detection.map(|d| (r.image_id, d)))
            .collect())
    }

    fn erc(&self) -> Result<()> {
        let ds = self.dataset()?;
        let split = self.split_ids()?;
        let results = self.score_results(&ds, &split)?;
        let dets = self.detections()?;
        let truths = split
            .test_ids
            .iter()
            .map(|id| Ok((id.clone(), ds.truth(id)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let (_, fb) = erc_features(&results, &dets, &truths, &ds.grid, self.config.erc.overlap_threshold)?;
        write_feature_file(&fb.rows, &self.prepare(artifacts::FEATURES)?)
    }

    fn feature_rows(&self) -> Result<Vec<crate::erc::ErcRow>> {
        read_feature_file(&self.require(artifacts::FEATURES, "erc")?)
    }

    fn train_ensemble(&self) -> Result<()> {
        let rows = self.feature_rows()?;
        let e = &self.config.ensemble;
        let hyper = e.hyperparams();
        let seed = self.config.stage_seeds().ensemble;
        let mut cvs = Vec::new();
        for &fk in &e.features {
            let fs = EnsembleFeatureSet {
                kind: fk,
                rows: rows.clone(),
            };
            for &kind in &e.classifiers {
                let cv = evaluate_ensemble(e.folds, &fs, kind, &hyper, seed)?;
                let (params, _) = train_ensemble(&fs, kind, &hyper, seed)?;
                self.write_json(&format!("ensemble/{}_{}.json", kind.name(), fk.name()), &params)?;
                cvs.push(cv);
            }
        }
        self.write_json(artifacts::CROSS_VALIDATION, &cvs)
    }

    fn cross_validation(&self) -> Result<Vec<CrossValidation>> {
        self.load(artifacts::CROSS_VALIDATION, "train-ensemble")
    }

    fn tau_i(&self, ds: &IngestedDataset, split: &DatasetSplit) -> Result<(f64, bool)> {
        match self.config.decision.tau_i {
            Some(t) => Ok((t, false)),
            None => {
                let truths = split.train_ids.iter().map(|id| ds.truth(id)).collect::<Result<Vec<_>>>()?;
                Ok((derive_tau_i(&truths)?, true))
            }
        }
    }

    fn decide(&self) -> Result<()> {
        let ds = self.dataset()?;
        let split = self.split_ids()?;
        let results = self.score_results(&ds, &split)?;
        let dets = self.detections()?;
        let rows = self.feature_rows()?;
        let cvs = self.cross_validation()?;
        let e = &self.config.ensemble;
        let cv = cvs
            .iter()
            .find(|cv| cv.kind == e.primary && cv.feature_kind == e.primary_features)
            .ok_or_else(|| {
                Error::missing(
                    "train-ensemble",
                    format!("no cross-validation for {}/{}", e.primary.name(), e.primary_features.name()),
                )
            })?;
        let ensemble = segment_maps(&rows, &cv.out_of_fold, ds.grid.n)?;
        let (tau_i, tau_i_derived) = self.tau_i(&ds, &split)?;
        let tau_o = self.config.decision.tau_o;
        let images = results
            .iter()
            .map(|r| {
                let id = &r.image_id;
                let ens = ensemble
                    .get(id)
                    .ok_or_else(|| Error::Validation(format!("{id}: no ensemble rows; rerun `erc`")))?;
                let ens_conf = crate::scoring::overall_confidence(ens);
                let det = dets.get(id);
                Ok(ImageDecisionRecord {
                    image_id: id.clone(),
                    slp: r.b_hat.flatten().into_iter().map(u8::from).collect(),
                    conf_c: r.conf_c,
                    ilp: ilp_decide(r.conf_c, tau_i),
                    ensemble: ens.flatten().into_iter().map(u8::from).collect(),
                    ensemble_conf_c: ens_conf,
                    ensemble_ilp: ilp_decide(ens_conf, tau_i),
                    iop: iop_decide(det, tau_o),
                    conf_o: det.map(|d| d.conf_o),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.write_json(
            artifacts::DECISIONS,
            &DecisionsFile {
                tau_s: self.config.decision.tau_s,
                tau_i,
                tau_i_derived,
                tau_o,
                ensemble_model: format!("{}/{}", e.primary.name(), e.primary_features.name()),
                images,
            },
        )
    }

    fn evaluate(&self) -> Result<()> {
        let ds = self.dataset()?;
        let split = self.split_ids()?;
        let results = self.score_results(&ds, &split)?;
        let dets = self.detections()?;
        let rows = self.feature_rows()?;
        let cvs = self.cross_validation()?;
        let decisions: DecisionsFile = self.load(artifacts::DECISIONS, "decide")?;
        let report = build_report(&self.config, &ds, &split, &results, &dets, &rows, &cvs, &decisions)?;
        self.write_text(artifacts::REPORT_TEXT, &report.to_text())?;
        self.write_text(artifacts::REPORT_JSON, &report.to_json())
    }

    fn render(&self) -> Result<()> {
        let ds = self.dataset()?;
        let decisions: DecisionsFile = self.load(artifacts::DECISIONS, "decide")?;
        let dets = self.detections()?;
        let source = self.image_source();
        let dir = self.path(artifacts::OVERLAYS);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for rec in &decisions.images {
            let image = source.load(&rec.image_id)?;
            let cells = BinaryGridMatrix::unflatten(ds.grid.n, rec.ensemble.iter().map(|&b| b == 1).collect())?;
            let mask = dets.get(&rec.image_id).map(|d| &d.mask);
            let out = render_overlay(&image, &cells, &ds.grid, mask)?;
            save_png(&out, &dir.join(format!("{}.png", rec.image_id)))?;
        }
        Ok(())
    }
}

fn accuracy(model: &Model, xs: &[Vec<f64>], ys: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    for (x, &y) in xs.iter().zip(ys) {
        hits += usize::from((model.score(x)? >= 0.5) == y);
    }
    Ok(hits as f64 / xs.len().max(1) as f64)
}

/// Regroups per-row predictions into one segment map per image.
fn segment_maps(
    rows: &[crate::erc::ErcRow],
    preds: &[crate::erc::SegmentPrediction],
    n: u32,
) -> Result<BTreeMap<String, BinaryGridMatrix>> {
    if rows.len() != preds.len() {
        return Err(Error::Validation(format!(
            "{} feature rows but {} ensemble predictions; rerun `train-ensemble`",
            rows.len(),
            preds.len()
        )));
    }
    let mut maps: BTreeMap<String, BinaryGridMatrix> = BTreeMap::new();
    for (r, p) in rows.iter().zip(preds) {
        let idx = SegmentIndex::new(r.x, r.y, n)?;
        maps.entry(r.image_id.clone())
            .or_insert_with(|| BinaryGridMatrix::filled(n, false))
            .set(idx, p.corroded);
    }
    Ok(maps)
}

fn score_row(model: impl Into<String>, counts: ConfusionCounts) -> Result<ScoreRow> {
    Ok(ScoreRow {
        model: model.into(),
        scores: confusion_metrics(&counts)?,
        counts,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    config: &PipelineConfig,
    ds: &IngestedDataset,
    split: &DatasetSplit,
    results: &[ImageScoreResult],
    dets: &BTreeMap<String, DetectedObject>,
    rows: &[crate::erc::ErcRow],
    cvs: &[CrossValidation],
    decisions: &DecisionsFile,
) -> Result<EvaluationReport> {
    let truths = split
        .test_ids
        .iter()
        .map(|id| Ok((id.clone(), ds.truth(id)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let tau_i = decisions.tau_i;
    let image_truth = |id: &str| truths[id].count_ones() > 0;

    let mut slp = Vec::new();
    let mut ilp = Vec::new();
    let mut seg = ConfusionCounts::default();
    let mut img = ConfusionCounts::default();
    for r in results {
        let t = &truths[&r.image_id];
        for (idx, &b) in r.b_hat.iter() {
            seg.record(b, *t.get(idx));
        }
        img.record(ilp_decide(r.conf_c, tau_i) == ImageDecision::Corroded, image_truth(&r.image_id));
    }
    slp.push(score_row("scorer", seg)?);
    ilp.push(score_row("scorer", img)?);

    let mut cross_validation = Vec::new();
    for cv in cvs {
        let name = format!("ensemble {}/{}", cv.kind.name(), cv.feature_kind.name());
        let maps = segment_maps(rows, &cv.out_of_fold, ds.grid.n)?;
        let mut seg = ConfusionCounts::default();
        let mut img = ConfusionCounts::default();
        for id in &split.test_ids {
            let (m, t) = (&maps[id], &truths[id]);
            for (idx, &b) in m.iter() {
                seg.record(b, *t.get(idx));
            }
            let conf = crate::scoring::overall_confidence(m);
            img.record(ilp_decide(conf, tau_i) == ImageDecision::Corroded, image_truth(id));
        }
        slp.push(score_row(name.clone(), seg)?);
        ilp.push(score_row(name.clone(), img)?);
        cross_validation.push(ScoreRow {
            model: name,
            counts: cv.pooled,
            scores: cv.mean,
        });
    }

    let mut notes = Vec::new();
    let objects = split
        .test_ids
        .iter()
        .map(|id| Ok((id.clone(), ds.object(id)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let iop = if objects.values().all(Option::is_none) {
        None
    } else {
        let counts = ConfusionCounts::from_pairs(decisions.images.iter().map(|d| {
            (d.iop == ObjectDecision::Present, objects[&d.image_id].is_some())
        }));
        Some(score_row("object", counts)?)
    };

    let thresholds = &config.decision.iou_thresholds;
    let desc = ImageDescriptor::new("image", ds.grid.image_width, ds.grid.image_height)?;
    let (mut mask_ious, mut bbox_ious, mut accepted) = (Vec::new(), Vec::new(), Vec::new());
    for id in &split.test_ids {
        if let (Some(det), Some(truth)) = (dets.get(id), &objects[id]) {
            mask_ious.push(iou_mask(&det.mask, &truth.mask, &desc)?);
            bbox_ious.push(iou_bbox(&det.bbox, &truth.bbox));
            accepted.push(det.conf_o >= config.decision.tau_o);
        }
    }
    let n_accepted = accepted.iter().filter(|&&a| a).count();
    let iou = if n_accepted == 0 {
        if !mask_ious.is_empty() {
            notes.push("no detection reached tau_o; IoU precision is undefined".into());
        }
        None
    } else {
        let at = |ious: &[f64]| {
            thresholds
                .iter()
                .map(|&th| precision_at_iou(ious, &accepted, th))
                .collect::<Result<Vec<_>>>()
        };
        let mask_precision = at(&mask_ious)?;
        let bbox_precision = at(&bbox_ious)?;
        Some(IouTable {
            thresholds: thresholds.clone(),
            ap_mask: average_precision(&mask_precision)?,
            ap_bbox: average_precision(&bbox_precision)?,
            mask_precision,
            bbox_precision,
            accepted: n_accepted,
            evaluated: accepted.len(),
        })
    };

    Ok(EvaluationReport {
        seed: config.seed,
        n: ds.grid.n,
        total_images: ds.images.len(),
        test_images: split.test_ids.len(),
        test_segments: split.test_ids.len() * ds.grid.segment_count(),
        tau_s: config.decision.tau_s,
        tau_i,
        tau_i_derived: decisions.tau_i_derived,
        tau_o: config.decision.tau_o,
        overlap_threshold: config.erc.overlap_threshold,
        folds: config.ensemble.folds,
        slp,
        ilp,
        iop,
        iou,
        notes,
        cross_validation,
    })
}

/// Runs `stages` (all stages for the configured kinds when empty).
pub fn run_pipeline(config: PipelineConfig, stages: &[Stage]) -> Result<()> {
    let p = Pipeline::new(config)?;
    let stages = if stages.is_empty() { p.default_stages() } else { stages.to_vec() };
    p.run(&stages)
}

/// Reads the evaluation report written by `evaluate`.
pub fn read_report(run_dir: &Path) -> Result<EvaluationReport> {
    let path = run_dir.join(artifacts::REPORT_JSON);
    if !path.exists() {
        return Err(Error::missing("evaluate", format!("{} not found", path.display())));
    }
    serde_json::from_str(&read_text(&path)?).map_err(|e| Error::parse(path.display().to_string(), e))
}

