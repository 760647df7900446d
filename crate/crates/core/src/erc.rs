//! Ensemble region-based corrosion detection.
//!
//! For every test image the predicted object mask is intersected with each
//! grid segment. A segment whose overlap fraction reaches the threshold is
//! marked as part of the object (`tB = 1`) and receives the object
//! confidence scaled by the overlap (`tI = fraction * conf_o`); otherwise
//! both are 0. Together with the scorer's outputs and the ground truth this
//! yields two feature sets, one row per segment:
//!
//! * `FB`: `(bhat, tB)` binary decisions,
//! * `FC`: `(segment confidence, tI)`.
//!
//! A small classifier trained on either set gives the final segment decision.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::DetectedObject;
use crate::error::{Error, Result};
use crate::geometry::{rasterize_polygon, BinaryGridMatrix, GridSpec, SegmentIndex};
use crate::learn::{Architecture, Model, TrainParams, TrainReport};
use crate::metrics::{confusion_metrics, mean_scores, ClassificationScores, ConfusionCounts};
use crate::scoring::ImageScoreResult;

/// Minimum fraction of a segment covered by the object mask for `tB = 1`.
pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.10;

/// Per-segment fusion record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErcRow {
    pub image_id: String,
    pub x: u32,
    pub y: u32,
    pub conf_c_seg: f64,
    pub bhat: u8,
    #[serde(rename = "tB")]
    pub tb: u8,
    #[serde(rename = "tI")]
    pub ti: f64,
    pub truth: u8,
}

impl ErcRow {
    pub fn segment(&self) -> SegmentIndex {
        SegmentIndex { x: self.x, y: self.y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureKind {
    /// `(bhat, tB)`
    FB,
    /// `(segment confidence, tI)`
    FC,
}

impl FeatureKind {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureKind::FB => "FB",
            FeatureKind::FC => "FC",
        }
    }
}

/// Rows projected onto one feature kind, labelled with the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleFeatureSet {
    pub kind: FeatureKind,
    pub rows: Vec<ErcRow>,
}

impl EnsembleFeatureSet {
    pub fn features_of(kind: FeatureKind, row: &ErcRow) -> Vec<f64> {
        match kind {
            FeatureKind::FB => vec![row.bhat as f64, row.tb as f64],
            FeatureKind::FC => vec![row.conf_c_seg, row.ti],
        }
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| Self::features_of(self.kind, r)).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.truth == 1).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            kind: self.kind,
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

/// `(tB, tI)` for a segment with the given mask overlap fraction.
pub fn overlap_targets(fraction: f64, conf_o: f64, threshold: f64) -> (bool, f64) {
    if fraction >= threshold {
        (true, fraction * conf_o)
    } else {
        (false, 0.0)
    }
}

/// Builds `(FC, FB)` from the scorer results, detections (absent key means
/// no object found) and ground-truth matrices of the same images.
pub fn erc_features(
    score_results: &[ImageScoreResult],
    detections: &BTreeMap<String, DetectedObject>,
    truths: &BTreeMap<String, BinaryGridMatrix>,
    grid: &GridSpec,
    overlap_threshold: f64,
) -> Result<(EnsembleFeatureSet, EnsembleFeatureSet)> {
    if !(0.0..=1.0).contains(&overlap_threshold) {
        return Err(Error::Config(format!(
            "overlap threshold must be in [0, 1], got {overlap_threshold}"
        )));
    }
    let seg_px = grid.seg_width as f64 * grid.seg_height as f64;
    let mut rows = Vec::with_capacity(score_results.len() * grid.segment_count());
    for result in score_results {
        let id = &result.image_id;
        let truth = truths
            .get(id)
            .ok_or_else(|| Error::Validation(format!("{id}: no ground-truth matrix")))?;
        if result.cs.n() != grid.n || result.b_hat.n() != grid.n || truth.n() != grid.n {
            return Err(Error::Validation(format!(
                "{id}: matrices do not match the {}x{} grid",
                grid.n, grid.n
            )));
        }
        let raster = match detections.get(id) {
            Some(det) => {
                if (det.image_width, det.image_height) != (grid.image_width, grid.image_height) {
                    return Err(Error::Validation(format!(
                        "{id}: detection is for a {}x{} image, grid expects {}x{}",
                        det.image_width, det.image_height, grid.image_width, grid.image_height
                    )));
                }
                Some((rasterize_polygon(&det.mask, grid.image_width, grid.image_height), det.conf_o))
            }
            None => None,
        };
        for idx in grid.indices() {
            let (tb, ti) = match &raster {
                Some((r, conf_o)) => {
                    let (x0, y0, x1, y1) = grid.segment_pixels(idx);
                    let fraction = r.count_in(x0, y0, x1, y1) as f64 / seg_px;
                    overlap_targets(fraction, *conf_o, overlap_threshold)
                }
                None => (false, 0.0),
            };
            rows.push(ErcRow {
                image_id: id.clone(),
                x: idx.x,
                y: idx.y,
                conf_c_seg: *result.cs.get(idx),
                bhat: *result.b_hat.get(idx) as u8,
                tb: tb as u8,
                ti,
                truth: *truth.get(idx) as u8,
            });
        }
    }
    Ok((
        EnsembleFeatureSet {
            kind: FeatureKind::FC,
            rows: rows.clone(),
        },
        EnsembleFeatureSet {
            kind: FeatureKind::FB,
            rows,
        },
    ))
}

/// Writes the feature-set file: header `image_id,x,y,conf_c_seg,bhat,tB,tI,truth`.
pub fn write_feature_file(rows: &[ErcRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::parse(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Vec<ErcRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let rows = r
        .deserialize::<ErcRow>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    for row in &rows {
        if row.bhat > 1 || row.tb > 1 || row.truth > 1 || !(0.0..=1.0).contains(&row.ti) {
            return Err(Error::Validation(format!(
                "{}: invalid feature row for {} ({}, {})",
                path.display(),
                row.image_id,
                row.x,
                row.y
            )));
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Logistic,
    /// One-hidden-layer perceptron.
    Mlp,
    /// Linear max-margin classifier.
    Svm,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 3] = [ClassifierKind::Logistic, ClassifierKind::Mlp, ClassifierKind::Svm];

    pub fn name(&self) -> &'static str {
        match self {
            ClassifierKind::Logistic => "logistic",
            ClassifierKind::Mlp => "mlp",
            ClassifierKind::Svm => "svm",
        }
    }

    pub fn architecture(&self, hyper: &EnsembleHyperparams) -> Architecture {
        match self {
            ClassifierKind::Logistic => Architecture::Logistic,
            ClassifierKind::Mlp => Architecture::Mlp { hidden: hyper.hidden_units },
            ClassifierKind::Svm => Architecture::LinearSvm { l2: hyper.l2 },
        }
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ClassifierKind::Logistic),
            "mlp" => Ok(ClassifierKind::Mlp),
            "svm" => Ok(ClassifierKind::Svm),
            other => Err(Error::Config(format!("unknown classifier `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleHyperparams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_units: usize,
    pub l2: f64,
}

impl Default for EnsembleHyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 60,
            batch_size: 32,
            hidden_units: 4,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleClassifierParams {
    pub kind: ClassifierKind,
    pub feature_kind: FeatureKind,
    pub model: Model,
    pub seed: u64,
}

pub fn train_ensemble(
    fs: &EnsembleFeatureSet,
    kind: ClassifierKind,
    hyper: &EnsembleHyperparams,
    seed: u64,
) -> Result<(EnsembleClassifierParams, TrainReport)> {
    let mut model = Model::init(kind.architecture(hyper), 2, seed);
    let params = TrainParams {
        learning_rate: hyper.learning_rate,
        epochs: hyper.epochs,
        batch_size: hyper.batch_size,
        seed,
    };
    let report = model.train(&fs.features(), &fs.labels(), &params)?;
    Ok((
        EnsembleClassifierParams {
            kind,
            feature_kind: fs.kind,
            model,
            seed,
        },
        report,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentPrediction {
    pub corroded: bool,
    pub score: f64,
}

/// Final segment decision: corroded iff the classifier score is `>= 0.5`.
pub fn predict_ensemble(
    params: &EnsembleClassifierParams,
    fs: &EnsembleFeatureSet,
) -> Result<Vec<SegmentPrediction>> {
    if params.feature_kind != fs.kind {
        return Err(Error::Validation(format!(
            "classifier was trained on {} features but got {}",
            params.feature_kind.name(),
            fs.kind.name()
        )));
    }
    fs.rows
        .iter()
        .map(|r| {
            let score = params.model.score(&EnsembleFeatureSet::features_of(fs.kind, r))?;
            Ok(SegmentPrediction {
                corroded: score >= 0.5,
                score,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub counts: ConfusionCounts,
    pub scores: ClassificationScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub kind: ClassifierKind,
    pub feature_kind: FeatureKind,
    pub folds: Vec<FoldResult>,
    pub mean: ClassificationScores,
    /// Held-out prediction for every row, in row order.
    pub out_of_fold: Vec<SegmentPrediction>,
    /// Confusion counts pooled over all held-out predictions.
    pub pooled: ConfusionCounts,
}

/// Seeded contiguous fold assignment over a permutation of the rows.
pub fn fold_assignment(rows: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if rows < folds {
        return Err(Error::Validation(format!("{rows} rows cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..folds)
        .map(|f| order[f * rows / folds..(f + 1) * rows / folds].to_vec())
        .collect())
}

/// k-fold cross-validation: accuracy, precision, recall and F1 per fold and their mean.
pub fn evaluate_ensemble(
    folds: usize,
    fs: &EnsembleFeatureSet,
    kind: ClassifierKind,
    hyper: &EnsembleHyperparams,
    seed: u64,
) -> Result<CrossValidation> {
    let assignment = fold_assignment(fs.len(), folds, seed)?;
    let mut out_of_fold = vec![None; fs.len()];
    let mut results = Vec::with_capacity(folds);
    let mut pooled = ConfusionCounts::default();
    for (f, held_out) in assignment.iter().enumerate() {
        let train_idx: Vec<usize> = assignment
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        let (params, _) = train_ensemble(&fs.subset(&train_idx), kind, hyper, seed.wrapping_add(f as u64))?;
        let test = fs.subset(held_out);
        let preds = predict_ensemble(&params, &test)?;
        let counts = ConfusionCounts::from_pairs(
            preds.iter().zip(&test.rows).map(|(p, r)| (p.corroded, r.truth == 1)),
        );
        pooled.merge(&counts);
        for (&i, p) in held_out.iter().zip(preds) {
            out_of_fold[i] = Some(p);
        }
        results.push(FoldResult {
            counts,
            scores: confusion_metrics(&counts)?,
        });
    }
    let mean = mean_scores(&results.iter().map(|r| r.scores).collect::<Vec<_>>())
        .expect("at least two folds");
    Ok(CrossValidation {
        kind,
        feature_kind: fs.kind,
        folds: results,
        mean,
        out_of_fold: out_of_fold.into_iter().map(|p| p.expect("every row held out once")).collect(),
        pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ConfidenceGridMatrix, PolygonMask};

    #[test]
    fn overlap_rule_table() {
        assert_eq!(overlap_targets(1.0, 0.9, 0.1), (true, 0.9));
        assert_eq!(overlap_targets(0.05, 0.9, 0.1), (false, 0.0));
        assert!(overlap_targets(0.10, 0.9, 0.1).0);
        let (tb, ti) = overlap_targets(0.5, 0.8, 0.1);
        assert!(tb);
        assert!((ti - 0.4).abs() < 1e-15);
    }

    fn one_image(det: Option<DetectedObject>) -> (EnsembleFeatureSet, EnsembleFeatureSet) {
        let grid = GridSpec::new(20, 20, 2).unwrap();
        let cs = ConfidenceGridMatrix::from_confidences(2, vec![0.9, 0.2, 0.7, 0.1]).unwrap();
        let result = ImageScoreResult::from_confidences("a", cs, 0.5);
        let truth = BinaryGridMatrix::unflatten(2, vec![true, false, false, false]).unwrap();
        let dets: BTreeMap<_, _> = det.into_iter().map(|d| (d.image_id.clone(), d)).collect();
        let truths = BTreeMap::from([("a".to_string(), truth)]);
        erc_features(&[result], &dets, &truths, &grid, 0.1).unwrap()
    }

    #[test]
    fn features_from_mask_overlap() {
        // mask covers segment (1,1) fully and half of segment (1,2)
        let mask = PolygonMask::rectangle(0.0, 0.0, 15.0, 10.0).unwrap();
        let det = DetectedObject::new("a", 20, 20, "tower", mask, 0.8).unwrap();
        let (fc, fb) = one_image(Some(det));
        assert_eq!(fc.len(), 4);
        let ti: Vec<f64> = fc.rows.iter().map(|r| r.ti).collect();
        assert_eq!(ti, vec![0.8, 0.4, 0.0, 0.0]);
        assert_eq!(fb.features()[0], vec![1.0, 1.0]);
        assert_eq!(fb.features()[1], vec![0.0, 1.0]);
        assert_eq!(fc.features()[2], vec![0.7, 0.0]);
        assert_eq!(fb.labels(), vec![true, false, false, false]);
    }

    #[test]
    fn absent_detection_zeroes_targets() {
        let (fc, _) = one_image(None);
        assert!(fc.rows.iter().all(|r| r.tb == 0 && r.ti == 0.0));
    }

    #[test]
    fn grid_mismatch_rejected() {
        let grid = GridSpec::new(20, 20, 4).unwrap();
        let cs = ConfidenceGridMatrix::from_confidences(2, vec![0.1; 4]).unwrap();
        let result = ImageScoreResult::from_confidences("a", cs, 0.5);
        let truths = BTreeMap::from([("a".to_string(), BinaryGridMatrix::filled(2, false))]);
        assert!(erc_features(&[result], &BTreeMap::new(), &truths, &grid, 0.1).is_err());
    }

    #[test]
    fn layout_mismatch_rejected() {
        let (fc, fb) = one_image(None);
        let params = EnsembleClassifierParams {
            kind: ClassifierKind::Logistic,
            feature_kind: FeatureKind::FB,
            model: Model::zeros(Architecture::Logistic, 2),
            seed: 0,
        };
        assert!(predict_ensemble(&params, &fc).is_err());
        // zero weights sit on the boundary and resolve to corroded
        assert!(predict_ensemble(&params, &fb).unwrap().iter().all(|p| p.corroded && p.score == 0.5));
    }

    #[test]
    fn folds_of_equal_size() {
        let folds = fold_assignment(10, 2, 3).unwrap();
        assert_eq!(folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5]);
        assert_eq!(folds, fold_assignment(10, 2, 3).unwrap());
        assert!(fold_assignment(10, 1, 3).is_err());
        assert!(fold_assignment(3, 4, 3).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let (fc, _) = one_image(Some(
            DetectedObject::new("a", 20, 20, "tower", PolygonMask::rectangle(0.0, 0.0, 13.0, 20.0).unwrap(), 0.7)
                .unwrap(),
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        write_feature_file(&fc.rows, &path).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("image_id,x,y,conf_c_seg,bhat,tB,tI,truth\n"));
        assert_eq!(read_feature_file(&path).unwrap(), fc.rows);
    }
}
