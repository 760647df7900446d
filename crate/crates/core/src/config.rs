//! Pipeline configuration: one TOML document, any value overridable by its
//! dotted key (`decision.tau_s=0.4`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::erc::{ClassifierKind, EnsembleHyperparams, FeatureKind, DEFAULT_OVERLAP_THRESHOLD};
use crate::error::{Error, Result};
use crate::geometry::RemainderPolicy;
use crate::learn::Architecture;
use crate::metrics::DecisionConfig;
use crate::scoring::ColorRange;
use crate::synth::{LATTICE_COLOR, RUST_RANGE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    /// Run directory; every artifact is written below it.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub decision: DecisionConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub ciss: CissConfig,
    #[serde(default)]
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub erc: ErcConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory of `<image_id>.png` / `.ppm` files.
    pub images: PathBuf,
    /// Directory of grid annotation JSON files, one per image.
    pub grid_annotations: PathBuf,
    /// Directory of LabelMe object annotations named `<image_id>.json`.
    #[serde(default)]
    pub object_annotations: Option<PathBuf>,
    /// Score file produced by an external segment classifier.
    #[serde(default)]
    pub external_scores: Option<PathBuf>,
    /// Directory of LabelMe predicted-mask files with a `confidence`.
    #[serde(default)]
    pub external_masks: Option<PathBuf>,
    /// Shape label of the inspected structure; `None` accepts any label.
    #[serde(default)]
    pub target_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: u32,
    #[serde(default)]
    pub remainder: RemainderPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Number of training images `k`; overrides `train_fraction`.
    pub train_images: Option<usize>,
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_images: None,
            train_fraction: 2.0 / 3.0,
        }
    }
}

impl SplitConfig {
    pub fn train_count(&self, m: usize) -> usize {
        self.train_images
            .unwrap_or_else(|| (self.train_fraction * m as f64).floor() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CissConfig {
    /// Fraction of the balanced set held out for scorer validation; 0 disables.
    pub validation_fraction: f64,
    pub write_crops: bool,
}

impl Default for CissConfig {
    fn default() -> Self {
        Self {
            validation_fraction: 0.0,
            write_crops: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    /// Color-feature learner trained on the balanced segment set.
    Baseline,
    /// Fixed rule: 1 when a segment has enough pixels in `color`.
    ColorRule,
    /// Scores imported from `dataset.external_scores`.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub architecture: Architecture,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub color: ColorRange,
    pub min_pixels: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Baseline,
            architecture: Architecture::Logistic,
            learning_rate: 0.5,
            epochs: 50,
            batch_size: 32,
            color: RUST_RANGE,
            min_pixels: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    /// Color-threshold connected-component detector.
    Baseline,
    /// Masks imported from `dataset.external_masks`.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub color: [u8; 3],
    pub tolerance: u8,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            kind: DetectorKind::Baseline,
            color: LATTICE_COLOR,
            tolerance: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErcConfig {
    pub overlap_threshold: f64,
}

impl Default for ErcConfig {
    fn default() -> Self {
        Self {
            overlap_threshold: DEFAULT_OVERLAP_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub classifiers: Vec<ClassifierKind>,
    pub features: Vec<FeatureKind>,
    pub folds: usize,
    /// Model whose decisions are used for the final segment map and overlays.
    pub primary: ClassifierKind,
    pub primary_features: FeatureKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_units: usize,
    pub l2: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        let h = EnsembleHyperparams::default();
        Self {
            classifiers: ClassifierKind::ALL.to_vec(),
            features: vec![FeatureKind::FB, FeatureKind::FC],
            folds: 5,
            primary: ClassifierKind::Logistic,
            primary_features: FeatureKind::FB,
            learning_rate: h.learning_rate,
            epochs: h.epochs,
            batch_size: h.batch_size,
            hidden_units: h.hidden_units,
            l2: h.l2,
        }
    }
}

impl EnsembleConfig {
    pub fn hyperparams(&self) -> EnsembleHyperparams {
        EnsembleHyperparams {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            hidden_units: self.hidden_units,
            l2: self.l2,
        }
    }
}

/// Splits `key=value`; the value is read as a TOML literal, falling back to a bare string.
pub fn parse_override(spec: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets `value` at the dotted `key`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses a TOML document after applying overrides.
pub fn load_toml<T: serde::de::DeserializeOwned>(text: &str, overrides: &[String]) -> Result<T> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("invalid configuration: {e}")))?;
    for spec in overrides {
        let (key, value) = parse_override(spec)?;
        apply_override(&mut table, &key, value)?;
    }
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("invalid configuration: {e}")))
}

impl PipelineConfig {
    /// Reads a configuration file. Relative paths resolve against its directory.
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, overrides)
    }

    pub fn from_toml(text: &str, base_dir: &Path, overrides: &[String]) -> Result<Self> {
        let mut cfg: Self = load_toml(text, overrides)?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        let d = &mut self.dataset;
        fix(&mut d.images);
        fix(&mut d.grid_annotations);
        for p in [&mut d.object_annotations, &mut d.external_scores, &mut d.external_masks]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.n == 0 {
            return Err(Error::Config("grid.n must be at least 1".into()));
        }
        self.decision.validate()?;
        let f = self.split.train_fraction;
        if self.split.train_images.is_none() && !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("split.train_fraction must be in (0, 1), got {f}")));
        }
        let v = self.ciss.validation_fraction;
        if !(0.0..1.0).contains(&v) {
            return Err(Error::Config(format!("ciss.validation_fraction must be in [0, 1), got {v}")));
        }
        if !(0.0..=1.0).contains(&self.erc.overlap_threshold) {
            return Err(Error::Config("erc.overlap_threshold must be in [0, 1]".into()));
        }
        let e = &self.ensemble;
        if e.classifiers.is_empty() || e.features.is_empty() {
            return Err(Error::Config("ensemble.classifiers and ensemble.features must not be empty".into()));
        }
        if e.folds < 2 {
            return Err(Error::Config(format!("ensemble.folds must be at least 2, got {}", e.folds)));
        }
        if !e.classifiers.contains(&e.primary) || !e.features.contains(&e.primary_features) {
            return Err(Error::Config(
                "ensemble.primary and ensemble.primary_features must be among the trained models".into(),
            ));
        }
        if e.batch_size == 0 || self.scorer.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Seeds of the randomized stages, derived from `seed`.
    pub fn stage_seeds(&self) -> StageSeeds {
        StageSeeds {
            split: self.seed,
            ciss: self.seed.wrapping_add(1),
            scorer: self.seed.wrapping_add(2),
            ensemble: self.seed.wrapping_add(3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub split: u64,
    pub ciss: u64,
    pub scorer: u64,
    pub ensemble: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dataset]
        images = "img"
        grid_annotations = "grid"
        [grid]
        n = 4
    "#;

    #[test]
    fn defaults_and_paths() {
        let cfg = PipelineConfig::from_toml(MINIMAL, Path::new("/data"), &[]).unwrap();
        assert_eq!(cfg.dataset.images, PathBuf::from("/data/img"));
        assert_eq!(cfg.out, PathBuf::from("/data/run"));
        assert_eq!(cfg.decision.tau_s, 0.5);
        assert_eq!(cfg.ensemble.folds, 5);
    }

    #[test]
    fn dotted_overrides() {
        let o = vec![
            "decision.tau_s=0.25".to_string(),
            "grid.n=8".to_string(),
            "scorer.kind=color-rule".to_string(),
            "ensemble.classifiers=[\"svm\"]".to_string(),
            "ensemble.primary=svm".to_string(),
        ];
        let cfg = PipelineConfig::from_toml(MINIMAL, Path::new("."), &o).unwrap();
        assert_eq!(cfg.decision.tau_s, 0.25);
        assert_eq!(cfg.grid.n, 8);
        assert_eq!(cfg.scorer.kind, ScorerKind::ColorRule);
        assert_eq!(cfg.ensemble.classifiers, vec![ClassifierKind::Svm]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for o in ["decision.tau_z=1", "decision.tau_s=2.0", "grid.n=0", "nonsense"] {
            let r = PipelineConfig::from_toml(MINIMAL, Path::new("."), &[o.to_string()]);
            assert!(matches!(r, Err(Error::Config(_))), "{o}");
        }
    }

    #[test]
    fn hash_tracks_values() {
        let a = PipelineConfig::from_toml(MINIMAL, Path::new("."), &[]).unwrap();
        let b = PipelineConfig::from_toml(MINIMAL, Path::new("."), &["seed=1".into()]).unwrap();
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
