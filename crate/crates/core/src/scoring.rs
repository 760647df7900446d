//! Segment scoring: turns each segment of an image into a corrosion
//! confidence, thresholds the confidences into the segment-level decision
//! matrix and aggregates them into the image-level confidence.
//!
//! Scorers are pluggable through [`SegmentScorer`]. Two are provided: a
//! shallow learner over color statistics ([`BaselineScorer`]) and a fixed
//! color-range rule ([`ColorRuleScorer`]). Scores produced elsewhere enter
//! through [`load_external_scores`].

use std::collections::BTreeSet;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ciss::{for_each_crop, ImageSource, SegmentSample};
use crate::error::{Error, Result};
use crate::geometry::{BinaryGridMatrix, ConfidenceGridMatrix, GridSpec};
use crate::learn::{Architecture, Model, TrainParams, TrainReport};

/// Default segment threshold `tau_s`.
pub const DEFAULT_TAU_S: f64 = 0.5;

pub const HISTOGRAM_BINS: usize = 8;
pub const DOWNSAMPLE_SIDE: usize = 8;
/// 3 means + 3 standard deviations + 3 x 8 histogram bins + 8 x 8 gray thumbnail.
pub const FEATURE_LEN: usize = 3 * 2 + 3 * HISTOGRAM_BINS + DOWNSAMPLE_SIDE * DOWNSAMPLE_SIDE;

/// Per-channel mean and standard deviation, normalized per-channel
/// histograms and an 8x8 area-averaged grayscale thumbnail, all in `[0, 1]`.
pub fn extract_features(pixels: &RgbImage) -> Result<Vec<f64>> {
    let (w, h) = pixels.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Validation("cannot extract features of an empty segment".into()));
    }
    let count = (w as f64) * (h as f64);
    let mut sum = [0u64; 3];
    let mut hist = [[0u64; HISTOGRAM_BINS]; 3];
    for p in pixels.pixels() {
        for c in 0..3 {
            sum[c] += p.0[c] as u64;
            hist[c][p.0[c] as usize * HISTOGRAM_BINS / 256] += 1;
        }
    }
    let means = sum.map(|s| s as f64 / count / 255.0);
    let mut sq_dev = [0.0f64; 3];
    for p in pixels.pixels() {
        for c in 0..3 {
            let d = p.0[c] as f64 / 255.0 - means[c];
            sq_dev[c] += d * d;
        }
    }
    let mut features = Vec::with_capacity(FEATURE_LEN);
    features.extend(means);
    features.extend(sq_dev.map(|s| (s / count).sqrt()));
    for channel in &hist {
        features.extend(channel.iter().map(|&b| b as f64 / count));
    }
    let side = DOWNSAMPLE_SIDE as u32;
    for by in 0..side {
        let (y0, y1) = block_range(by, side, h);
        for bx in 0..side {
            let (x0, x1) = block_range(bx, side, w);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let [r, g, b] = pixels.get_pixel(x, y).0;
                    acc += 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
                }
            }
            features.push(acc / ((x1 - x0) * (y1 - y0)) as f64 / 255.0);
        }
    }
    debug_assert_eq!(features.len(), FEATURE_LEN);
    Ok(features)
}

/// Pixel range of thumbnail block `i`; never empty, even for sides shorter than the thumbnail.
fn block_range(i: u32, blocks: u32, len: u32) -> (u32, u32) {
    let start = (i * len / blocks).min(len - 1);
    let end = ((i + 1) * len / blocks).max(start + 1);
    (start, end)
}

/// Produces a corrosion confidence in `[0, 1]` for one segment's pixels.
pub trait SegmentScorer: Sync {
    fn score(&self, pixels: &RgbImage) -> Result<f64>;
}

/// Parameters of the trainable baseline scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScorerParams {
    pub version: u32,
    pub seg_width: u32,
    pub seg_height: u32,
    pub feature_len: usize,
    pub model: Model,
}

pub const PARAMS_VERSION: u32 = 1;

impl BaselineScorerParams {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let params: Self =
            serde_json::from_str(text).map_err(|e| Error::parse("scorer parameters", e))?;
        if params.version != PARAMS_VERSION {
            return Err(Error::Validation(format!(
                "unsupported scorer parameter version {}",
                params.version
            )));
        }
        let expected = params.model.architecture.parameter_count(params.feature_len);
        if params.feature_len != FEATURE_LEN
            || params.model.input_dim != FEATURE_LEN
            || params.model.weights.len() != expected
        {
            return Err(Error::Validation("scorer parameter layout does not match features".into()));
        }
        if params.model.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Validation("scorer parameters contain non-finite weights".into()));
        }
        Ok(params)
    }
}

/// Scorer backed by [`BaselineScorerParams`].
#[derive(Debug, Clone)]
pub struct BaselineScorer {
    pub params: BaselineScorerParams,
}

impl SegmentScorer for BaselineScorer {
    fn score(&self, pixels: &RgbImage) -> Result<f64> {
        let (w, h) = pixels.dimensions();
        if (w, h) != (self.params.seg_width, self.params.seg_height) {
            return Err(Error::Validation(format!(
                "segment is {w}x{h}, scorer was trained on {}x{}",
                self.params.seg_width, self.params.seg_height
            )));
        }
        self.params.model.score(&extract_features(pixels)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineHyperparams {
    pub architecture: Architecture,
    pub train: TrainParams,
}

impl Default for BaselineHyperparams {
    fn default() -> Self {
        Self {
            architecture: Architecture::Logistic,
            train: TrainParams::default(),
        }
    }
}

/// Extracts features for every sample, loading each source image once.
pub fn sample_features(
    samples: &[SegmentSample],
    grid: &GridSpec,
    source: &dyn ImageSource,
) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let mut xs = vec![Vec::new(); samples.len()];
    for_each_crop(samples, grid, source, |i, _, crop| {
        xs[i] = extract_features(&crop)?;
        Ok(())
    })?;
    Ok((xs, samples.iter().map(|s| s.label).collect()))
}

/// Trains the baseline scorer on binary cross-entropy (hinge for the max-margin variant).
pub fn train_baseline(
    samples: &[SegmentSample],
    grid: &GridSpec,
    source: &dyn ImageSource,
    hyper: &BaselineHyperparams,
) -> Result<(BaselineScorerParams, TrainReport)> {
    let (xs, ys) = sample_features(samples, grid, source)?;
    train_baseline_on_features(&xs, &ys, grid.seg_width, grid.seg_height, hyper)
}

pub fn train_baseline_on_features(
    xs: &[Vec<f64>],
    ys: &[bool],
    seg_width: u32,
    seg_height: u32,
    hyper: &BaselineHyperparams,
) -> Result<(BaselineScorerParams, TrainReport)> {
    let mut model = Model::init(hyper.architecture, FEATURE_LEN, hyper.train.seed);
    let report = model.train(xs, ys, &hyper.train)?;
    Ok((
        BaselineScorerParams {
            version: PARAMS_VERSION,
            seg_width,
            seg_height,
            feature_len: FEATURE_LEN,
            model,
        },
        report,
    ))
}

/// Inclusive per-channel RGB box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorRange {
    pub min: [u8; 3],
    pub max: [u8; 3],
}

impl ColorRange {
    pub fn contains(&self, rgb: [u8; 3]) -> bool {
        (0..3).all(|c| rgb[c] >= self.min[c] && rgb[c] <= self.max[c])
    }
}

/// Scores 1 for a segment containing at least `min_pixels` pixels inside
/// `range`, else 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorRuleScorer {
    pub range: ColorRange,
    pub min_pixels: usize,
}

impl SegmentScorer for ColorRuleScorer {
    fn score(&self, pixels: &RgbImage) -> Result<f64> {
        let hits = pixels.pixels().filter(|p| self.range.contains(p.0)).count();
        Ok(if hits >= self.min_pixels.max(1) { 1.0 } else { 0.0 })
    }
}

/// Scorer output for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScoreResult {
    pub image_id: String,
    /// Per-segment confidences.
    pub cs: ConfidenceGridMatrix,
    /// Segment decisions: `cs >= tau_s`
    pub b_hat: BinaryGridMatrix,
    /// Image confidence: fraction of segments decided corroded.
    pub conf_c: f64,
    pub tau_s: f64,
}

impl ImageScoreResult {
    pub fn from_confidences(image_id: impl Into<String>, cs: ConfidenceGridMatrix, tau_s: f64) -> Self {
        let b_hat = cs.map(|&c| c >= tau_s);
        let conf_c = overall_confidence(&b_hat);
        Self {
            image_id: image_id.into(),
            cs,
            b_hat,
            conf_c,
            tau_s,
        }
    }
}

/// Fraction of corroded cells.
pub fn overall_confidence(b_hat: &BinaryGridMatrix) -> f64 {
    let n = b_hat.n() as f64;
    b_hat.count_ones() as f64 / (n * n)
}

/// Scores all `n²` segments of an image and applies `tau_s`.
pub fn score_image(
    scorer: &dyn SegmentScorer,
    image_id: &str,
    image: &RgbImage,
    grid: &GridSpec,
    tau_s: f64,
) -> Result<ImageScoreResult> {
    if !(0.0..=1.0).contains(&tau_s) {
        return Err(Error::Config(format!("tau_s must be in [0, 1], got {tau_s}")));
    }
    grid.check_image(image.width(), image.height())
        .map_err(|e| Error::Validation(format!("{image_id}: {e}")))?;
    let indices: Vec<_> = grid.indices().collect();
    let scores = indices
        .par_iter()
        .map(|&idx| {
            let crop = crate::ciss::crop_segment(image, grid, idx);
            let s = scorer.score(&crop).map_err(|e| {
                Error::Validation(format!("{image_id}: scoring segment ({}, {}) failed: {e}", idx.x, idx.y))
            })?;
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Validation(format!(
                    "{image_id}: scorer returned {s} for segment ({}, {})",
                    idx.x, idx.y
                )));
            }
            Ok(s)
        })
        .collect::<Result<Vec<f64>>>()?;
    let cs = ConfidenceGridMatrix::from_confidences(grid.n, scores)?;
    Ok(ImageScoreResult::from_confidences(image_id, cs, tau_s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    pub n: u32,
    /// `n²` confidences, row-major.
    pub confidences: Vec<f64>,
}

/// External score file: `{"tau_s": optional, "images": [{"image_id", "n", "confidences"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_s: Option<f64>,
    pub images: Vec<ScoreRecord>,
}

impl ScoreFile {
    pub fn from_results(results: &[ImageScoreResult], tau_s: Option<f64>) -> Self {
        Self {
            tau_s,
            images: results
                .iter()
                .map(|r| ScoreRecord {
                    image_id: r.image_id.clone(),
                    n: r.cs.n(),
                    confidences: r.cs.flatten(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("score file serializes")
    }
}

/// Parses and validates an external score file.
///
/// Every record must use `expected_n` and hold confidences in `[0, 1]`; when
/// `required_ids` is given, each of those images must be present.
pub fn load_external_scores(
    document: &str,
    expected_n: u32,
    required_ids: Option<&[String]>,
) -> Result<Vec<(String, ConfidenceGridMatrix)>> {
    let file: ScoreFile =
        serde_json::from_str(document).map_err(|e| Error::parse("score file", e))?;
    if file.images.is_empty() {
        log::warn!("score file contains no images");
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(file.images.len());
    for rec in file.images {
        if rec.n != expected_n {
            return Err(Error::Validation(format!(
                "{}: scores use n={} but the grid has n={expected_n}",
                rec.image_id, rec.n
            )));
        }
        if !seen.insert(rec.image_id.clone()) {
            return Err(Error::Validation(format!("{}: duplicate score record", rec.image_id)));
        }
        let cs = ConfidenceGridMatrix::from_confidences(rec.n, rec.confidences)
            .map_err(|e| Error::Validation(format!("{}: {e}", rec.image_id)))?;
        out.push((rec.image_id, cs));
    }
    if let Some(ids) = required_ids {
        if let Some(missing) = ids.iter().find(|id| !seen.contains(*id)) {
            return Err(Error::Validation(format!("score file has no record for `{missing}`")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    struct Constant(f64);
    impl SegmentScorer for Constant {
        fn score(&self, _: &RgbImage) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn uniform_gray_features() {
        let img = RgbImage::from_pixel(10, 6, Rgb([128, 128, 128]));
        let f = extract_features(&img).unwrap();
        assert_eq!(f.len(), 94);
        assert_eq!(f[0], f[1]);
        assert_eq!(f[1], f[2]);
        assert!(f[3..6].iter().all(|&s| s == 0.0));
        for c in 0..3 {
            let hist = &f[6 + c * 8..6 + (c + 1) * 8];
            assert_eq!(hist.iter().filter(|&&v| v > 0.0).count(), 1);
            assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn red_and_blue_differ_in_means() {
        let red = extract_features(&RgbImage::from_pixel(4, 4, Rgb([255, 0, 0]))).unwrap();
        let blue = extract_features(&RgbImage::from_pixel(4, 4, Rgb([0, 0, 255]))).unwrap();
        assert_ne!(red[0..3], blue[0..3]);
    }

    #[test]
    fn features_are_deterministic_for_tiny_segments() {
        let img = RgbImage::from_fn(3, 5, |x, y| Rgb([(x * 40) as u8, (y * 30) as u8, 7]));
        assert_eq!(extract_features(&img).unwrap(), extract_features(&img).unwrap());
    }

    #[test]
    fn constant_scorers() {
        let grid = GridSpec::new(8, 8, 4).unwrap();
        let img = RgbImage::new(8, 8);
        let zero = score_image(&Constant(0.0), "z", &img, &grid, 0.5).unwrap();
        assert_eq!(zero.conf_c, 0.0);
        assert_eq!(zero.b_hat.count_ones(), 0);
        let one = score_image(&Constant(1.0), "o", &img, &grid, 0.5).unwrap();
        assert_eq!(one.conf_c, 1.0);
        assert!(score_image(&Constant(1.5), "bad", &img, &grid, 0.5).is_err());
        assert!(score_image(&Constant(0.5), "dims", &RgbImage::new(9, 8), &grid, 0.5).is_err());
    }

    #[test]
    fn three_of_sixteen_segments() {
        let mut cells = vec![0.1; 16];
        for i in [0, 5, 15] {
            cells[i] = 0.9;
        }
        let cs = ConfidenceGridMatrix::from_confidences(4, cells).unwrap();
        let r = ImageScoreResult::from_confidences("a", cs, 0.5);
        assert_eq!(r.conf_c, 0.1875);
    }

    #[test]
    fn threshold_is_inclusive() {
        let cs = ConfidenceGridMatrix::from_confidences(1, vec![0.5]).unwrap();
        assert!(*ImageScoreResult::from_confidences("a", cs, 0.5).b_hat.as_slice().first().unwrap());
    }

    #[test]
    fn external_scores_validation() {
        let ok = r#"{"images":[{"image_id":"a","n":1,"confidences":[0.3]}]}"#;
        assert_eq!(load_external_scores(ok, 1, None).unwrap().len(), 1);
        let high = r#"{"images":[{"image_id":"a","n":1,"confidences":[1.2]}]}"#;
        assert!(load_external_scores(high, 1, None).is_err());
        assert!(load_external_scores(ok, 2, None).is_err());
        assert!(load_external_scores(ok, 1, Some(&["b".to_string()])).is_err());
        assert!(load_external_scores(r#"{"images":[]}"#, 16, None).unwrap().is_empty());
    }

    #[test]
    fn params_file_round_trip_is_exact() {
        let mut model = Model::init(Architecture::Mlp { hidden: 3 }, FEATURE_LEN, 77);
        model.weights[0] = 0.1 + 0.2;
        let params = BaselineScorerParams {
            version: PARAMS_VERSION,
            seg_width: 5,
            seg_height: 4,
            feature_len: FEATURE_LEN,
            model,
        };
        assert_eq!(BaselineScorerParams::from_json(&params.to_json()).unwrap(), params);
    }

    #[test]
    fn baseline_rejects_wrong_segment_size() {
        let scorer = BaselineScorer {
            params: BaselineScorerParams {
                version: PARAMS_VERSION,
                seg_width: 4,
                seg_height: 4,
                feature_len: FEATURE_LEN,
                model: Model::zeros(Architecture::Logistic, FEATURE_LEN),
            },
        };
        assert_eq!(scorer.score(&RgbImage::new(4, 4)).unwrap(), 0.5);
        assert!(scorer.score(&RgbImage::new(5, 4)).is_err());
    }
}
