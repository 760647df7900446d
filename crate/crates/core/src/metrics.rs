//! Decision rules (segment, image and object level) and evaluation metrics.
//!
//! Every threshold comparison is non-strict (`value >= threshold`).
//! Undefined ratios (`0 / 0`) evaluate to 0 and set a flag instead of NaN.

use serde::{Deserialize, Serialize};

use crate::detection::DetectedObject;
use crate::error::{Error, Result};
use crate::geometry::{
    rasterize_mask, BinaryGridMatrix, BoundingBox, ConfidenceGridMatrix, ImageDescriptor,
    PolygonMask,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionConfig {
    /// Segment threshold `tau_s`.
    pub tau_s: f64,
    /// Image threshold `tau_i`; `None` (written `"derive"`) derives it from
    /// the training labels.
    #[serde(with = "tau_i_field")]
    pub tau_i: Option<f64>,
    /// Object threshold `tau_o`.
    pub tau_o: f64,
    pub iou_thresholds: Vec<f64>,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self {
            tau_s: 0.5,
            tau_i: Some(0.1),
            tau_o: 0.9,
            iou_thresholds: default_iou_thresholds(),
        }
    }
}

mod tau_i_field {
    use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => Repr::Value(*x),
            None => Repr::Word("derive".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(x) => Ok(Some(x)),
            Repr::Word(w) if w == "derive" => Ok(None),
            Repr::Word(w) => Err(de::Error::custom(format!(
                "tau_i must be a number or \"derive\", got \"{w}\""
            ))),
        }
    }
}

/// 0.50, 0.55, ..., 0.75.
pub fn default_iou_thresholds() -> Vec<f64> {
    (0..6).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit("tau_s", self.tau_s)?;
        unit("tau_o", self.tau_o)?;
        if let Some(t) = self.tau_i {
            unit("tau_i", t)?;
        }
        if self.iou_thresholds.is_empty() {
            return Err(Error::Config("at least one IoU threshold is required".into()));
        }
        for &t in &self.iou_thresholds {
            unit("iou threshold", t)?;
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("IoU thresholds must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Segment-level prediction: corroded iff `confidence >= tau_s`.
pub fn slp_decide(cs: &ConfidenceGridMatrix, tau_s: f64) -> BinaryGridMatrix {
    cs.map(|&c| c >= tau_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageDecision {
    Corroded,
    Clean,
}

/// Image-level prediction: corroded iff `conf_c >= tau_i`.
pub fn ilp_decide(conf_c: f64, tau_i: f64) -> ImageDecision {
    if conf_c >= tau_i {
        ImageDecision::Corroded
    } else {
        ImageDecision::Clean
    }
}

/// Mean over images of the proportion of corroded segments.
pub fn derive_tau_i(train_truths: &[BinaryGridMatrix]) -> Result<f64> {
    if train_truths.is_empty() {
        return Err(Error::Validation("cannot derive tau_i from an empty training set".into()));
    }
    let total: f64 = train_truths
        .iter()
        .map(|m| m.count_ones() as f64 / m.as_slice().len() as f64)
        .sum();
    Ok(total / train_truths.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectDecision {
    Present,
    Absent,
}

/// Industrial-object prediction: present iff a detection exists with `conf_o >= tau_o`.
pub fn iop_decide(det: Option<&DetectedObject>, tau_o: f64) -> ObjectDecision {
    match det {
        Some(d) if d.conf_o >= tau_o => ObjectDecision::Present,
        _ => ObjectDecision::Absent,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, predicted: bool, truth: bool) {
        match (predicted, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (p, t) in pairs {
            c.record(p, t);
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

/// Accuracy, precision, recall and F1 from confusion counts.
pub fn confusion_metrics(c: &ConfusionCounts) -> Result<ClassificationScores> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Validation("confusion counts are all zero".into()));
    }
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let (precision, precision_undefined) = ratio(tp, tp + fp);
    let (recall, recall_undefined) = ratio(tp, tp + fn_);
    let (f1, f1_undefined) = ratio(2.0 * precision * recall, precision + recall);
    Ok(ClassificationScores {
        accuracy: (tp + tn) / total as f64,
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
        f1_undefined,
    })
}

/// Element-wise mean of several score sets; a flag is set if it was set in any input.
pub fn mean_scores(scores: &[ClassificationScores]) -> Option<ClassificationScores> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    let avg = |f: fn(&ClassificationScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    Some(ClassificationScores {
        accuracy: avg(|s| s.accuracy),
        precision: avg(|s| s.precision),
        recall: avg(|s| s.recall),
        f1: avg(|s| s.f1),
        precision_undefined: scores.iter().any(|s| s.precision_undefined),
        recall_undefined: scores.iter().any(|s| s.recall_undefined),
        f1_undefined: scores.iter().any(|s| s.f1_undefined),
    })
}

/// Rasterized `|pred ∩ truth| / |pred ∪ truth|`.
pub fn iou_mask(pred: &PolygonMask, truth: &PolygonMask, image: &ImageDescriptor) -> Result<f64> {
    let a = rasterize_mask(pred, image);
    let b = rasterize_mask(truth, image);
    let inter = a.intersection_count(&b);
    let union = a.area_px() + b.area_px() - inter;
    if union == 0 {
        return Err(Error::Validation("both masks have zero area".into()));
    }
    Ok(inter as f64 / union as f64)
}

/// Closed-form rectangle IoU.
pub fn iou_bbox(pred: &BoundingBox, truth: &BoundingBox) -> f64 {
    let inter = pred.intersection_area(truth);
    let union = pred.area() + truth.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Precision over accepted detections: a detection with `iou >= th` is a
/// true positive, any other accepted detection a false positive.
pub fn precision_at_iou(ious: &[f64], accepted: &[bool], th: f64) -> Result<f64> {
    if ious.len() != accepted.len() {
        return Err(Error::Validation(format!(
            "{} IoU values but {} acceptance flags",
            ious.len(),
            accepted.len()
        )));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    for (&iou, _) in ious.iter().zip(accepted).filter(|(_, &a)| a) {
        if iou >= th {
            tp += 1;
        } else {
            fp += 1;
        }
    }
    if tp + fp == 0 {
        return Err(Error::Validation("no accepted detections".into()));
    }
    Ok(tp as f64 / (tp + fp) as f64)
}

/// Arithmetic mean of the per-threshold precisions.
pub fn average_precision(precisions: &[f64]) -> Result<f64> {
    if precisions.is_empty() {
        return Err(Error::Validation("average precision of an empty list".into()));
    }
    Ok(precisions.iter().sum::<f64>() / precisions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use approx::assert_abs_diff_eq;

    #[test]
    fn slp_boundaries() {
        let at = ConfidenceGridMatrix::from_confidences(2, vec![0.5; 4]).unwrap();
        assert_eq!(slp_decide(&at, 0.5).count_ones(), 4);
        let below = ConfidenceGridMatrix::from_confidences(2, vec![0.49; 4]).unwrap();
        assert_eq!(slp_decide(&below, 0.5).count_ones(), 0);
    }

    #[test]
    fn ilp_boundaries() {
        assert_eq!(ilp_decide(0.1, 0.1), ImageDecision::Corroded);
        assert_eq!(ilp_decide(0.0, 1e-9), ImageDecision::Clean);
        assert_eq!(ilp_decide(26.0 / 256.0, 0.1), ImageDecision::Corroded);
    }

    #[test]
    fn tau_i_derivation() {
        let zeros = vec![BinaryGridMatrix::filled(4, false); 3];
        assert_eq!(derive_tau_i(&zeros).unwrap(), 0.0);
        let a = BinaryGridMatrix::unflatten(2, vec![true, false, false, false]).unwrap();
        let b = BinaryGridMatrix::unflatten(2, vec![true, true, true, false]).unwrap();
        assert_eq!(derive_tau_i(&[a, b]).unwrap(), 0.5);
        assert!(derive_tau_i(&[]).is_err());
    }

    #[test]
    fn iop_boundaries() {
        let mask = PolygonMask::rectangle(0.0, 0.0, 5.0, 5.0).unwrap();
        let det = DetectedObject::new("a", 10, 10, "tower", mask, 0.9).unwrap();
        assert_eq!(iop_decide(Some(&det), 0.9), ObjectDecision::Present);
        assert_eq!(iop_decide(Some(&det), 0.91), ObjectDecision::Absent);
        assert_eq!(iop_decide(None, 0.0), ObjectDecision::Absent);
    }

    #[test]
    fn confusion_by_hand() {
        let s = confusion_metrics(&ConfusionCounts { tp: 3, fp: 1, tn: 4, fn_: 2 }).unwrap();
        assert_abs_diff_eq!(s.accuracy, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(s.precision, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(s.recall, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(s.f1, 2.0 / 3.0, epsilon = 1e-12);
        let perfect = confusion_metrics(&ConfusionCounts { tp: 5, fp: 0, tn: 5, fn_: 0 }).unwrap();
        assert_eq!((perfect.accuracy, perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0, 1.0));
        let none = confusion_metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 4, fn_: 1 }).unwrap();
        assert_eq!(none.precision, 0.0);
        assert!(none.precision_undefined);
        assert!(confusion_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn mask_iou_cases() {
        let img = ImageDescriptor::new("i", 100, 100).unwrap();
        let a = PolygonMask::rectangle(10.0, 10.0, 50.0, 50.0).unwrap();
        assert_eq!(iou_mask(&a, &a, &img).unwrap(), 1.0);
        let far = PolygonMask::rectangle(60.0, 60.0, 90.0, 90.0).unwrap();
        assert_eq!(iou_mask(&a, &far, &img).unwrap(), 0.0);
        // squares offset by half a side: 0.5 / 1.5
        let half = PolygonMask::rectangle(30.0, 10.0, 70.0, 50.0).unwrap();
        assert_abs_diff_eq!(iou_mask(&a, &half, &img).unwrap(), 1.0 / 3.0, epsilon = 0.01);
        let tri = PolygonMask::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 1.0), Point::new(2.0, 2.0)])
            .unwrap();
        assert!(iou_mask(&tri, &tri, &img).is_err());
    }

    #[test]
    fn bbox_iou_cases() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BoundingBox::new(1.0, 0.0, 3.0, 2.0).unwrap();
        assert_eq!(iou_bbox(&a, &a), 1.0);
        assert_eq!(iou_bbox(&a, &BoundingBox::new(5.0, 5.0, 6.0, 6.0).unwrap()), 0.0);
        assert_abs_diff_eq!(iou_bbox(&a, &b), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn precision_cases() {
        assert_eq!(precision_at_iou(&[0.9; 4], &[true; 4], 0.5).unwrap(), 1.0);
        assert_eq!(precision_at_iou(&[0.6, 0.4], &[true, true], 0.5).unwrap(), 0.5);
        let mut ious = vec![0.8; 194];
        ious[0] = 0.2;
        let p = precision_at_iou(&ious, &[true; 194], 0.5).unwrap();
        // 193/194 = 99.4845%, printed as 99.49% after rounding up
        assert_abs_diff_eq!(p * 100.0, 99.49, epsilon = 0.01);
        assert!(precision_at_iou(&[0.9], &[false], 0.5).is_err());
    }

    #[test]
    fn ap_is_the_mean() {
        assert_eq!(average_precision(&[0.7; 5]).unwrap(), 0.7);
        assert!(average_precision(&[]).is_err());
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = DecisionConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.iou_thresholds, vec![0.5, 0.55, 0.6, 0.65, 0.7, 0.75]);
        let bad = DecisionConfig { iou_thresholds: vec![0.6, 0.5], ..cfg };
        assert!(bad.validate().is_err());
    }
}
