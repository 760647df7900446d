//! Evaluation report: segment, image and object decision scores, the IoU
//! precision table with AP, and ensemble cross-validation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::{ClassificationScores, ConfusionCounts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    pub counts: ConfusionCounts,
    pub scores: ClassificationScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouTable {
    pub thresholds: Vec<f64>,
    pub mask_precision: Vec<f64>,
    pub bbox_precision: Vec<f64>,
    pub ap_mask: f64,
    pub ap_bbox: f64,
    /// Detections with `conf_o >= tau_o`, out of `evaluated` matched pairs.
    pub accepted: usize,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub seed: u64,
    pub n: u32,
    pub total_images: usize,
    pub test_images: usize,
    pub test_segments: usize,
    pub tau_s: f64,
    pub tau_i: f64,
    pub tau_i_derived: bool,
    pub tau_o: f64,
    pub overlap_threshold: f64,
    pub folds: usize,
    pub slp: Vec<ScoreRow>,
    pub ilp: Vec<ScoreRow>,
    pub iop: Option<ScoreRow>,
    pub iou: Option<IouTable>,
    pub notes: Vec<String>,
    /// Mean of per-fold scores; counts pooled over folds.
    pub cross_validation: Vec<ScoreRow>,
}

fn pct(v: f64, undefined: bool) -> String {
    format!("{:>7.2}{}", 100.0 * v, if undefined { "*" } else { " " })
}

fn table(out: &mut String, rows: &[ScoreRow]) -> bool {
    let mut any_undefined = false;
    let _ = writeln!(
        out,
        "{:<22} {:>8} {:>8} {:>8} {:>8} {:>7} {:>7} {:>7} {:>7}",
        "model", "Acc%", "P%", "R%", "F1%", "TP", "FP", "TN", "FN"
    );
    for r in rows {
        let s = &r.scores;
        any_undefined |= s.precision_undefined || s.recall_undefined || s.f1_undefined;
        let _ = writeln!(
            out,
            "{:<22} {} {} {} {} {:>7} {:>7} {:>7} {:>7}",
            r.model,
            pct(s.accuracy, false),
            pct(s.precision, s.precision_undefined),
            pct(s.recall, s.recall_undefined),
            pct(s.f1, s.f1_undefined),
            r.counts.tp,
            r.counts.fp,
            r.counts.tn,
            r.counts.fn_
        );
    }
    any_undefined
}

impl EvaluationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut undefined = false;
        let _ = writeln!(out, "Corrosion detection evaluation");
        let _ = writeln!(
            out,
            "test images {} of {}, grid {n}x{n}, {} test segments, seed {}",
            self.test_images, self.total_images, self.test_segments, self.seed, n = self.n
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "Segment-level prediction (tau_s = {:.3})", self.tau_s);
        undefined |= table(&mut out, &self.slp);
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "Image-level prediction (tau_I = {:.3}{})",
            self.tau_i,
            if self.tau_i_derived { ", from training labels" } else { "" }
        );
        undefined |= table(&mut out, &self.ilp);
        let _ = writeln!(out);
        let _ = writeln!(out, "Object prediction (tau_o = {:.3})", self.tau_o);
        match &self.iop {
            Some(row) => {
                let c = &row.counts;
                let _ = writeln!(
                    out,
                    "accuracy {:.2}% ({}/{})",
                    100.0 * row.scores.accuracy,
                    c.tp + c.tn,
                    c.total()
                );
            }
            None => {
                let _ = writeln!(out, "no object annotations");
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "Object IoU precision (detections with conf_o >= tau_o)");
        match &self.iou {
            Some(t) => {
                let _ = writeln!(out, "{} of {} detections accepted", t.accepted, t.evaluated);
                let _ = writeln!(out, "{:<8} {:>8} {:>8}", "IoU_th", "mask%", "bbox%");
                for i in 0..t.thresholds.len() {
                    let _ = writeln!(
                        out,
                        "{:<8.2} {:>8.2} {:>8.2}",
                        t.thresholds[i],
                        100.0 * t.mask_precision[i],
                        100.0 * t.bbox_precision[i]
                    );
                }
                let _ = writeln!(out, "{:<8} {:>8.2} {:>8.2}", "AP", 100.0 * t.ap_mask, 100.0 * t.ap_bbox);
            }
            None => {
                let _ = writeln!(out, "not available");
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "Ensemble cross-validation ({} folds, mean over folds, overlap threshold {:.2})",
            self.folds, self.overlap_threshold
        );
        undefined |= table(&mut out, &self.cross_validation);
        if undefined {
            let _ = writeln!(out);
            let _ = writeln!(out, "* zero denominator, reported as 0");
        }
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
