//! Corrosion image segmentation and separation: pools every annotated
//! segment of the training images into corrosion and non-corrosion sets,
//! keeps all corrosion segments, draws twice as many non-corrosion segments
//! and shuffles the result into the scorer's training set.
//!
//! Samples are references (`image_id`, segment index); pixels are cropped on
//! demand through an [`ImageSource`].

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{load_rgb, save_png, GridAnnotation};
use crate::error::{Error, Result};
use crate::geometry::{GridSpec, SegmentIndex};

/// Negatives drawn per positive.
pub const NEGATIVES_PER_POSITIVE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentSample {
    pub image_id: String,
    pub index: SegmentIndex,
    /// `true` for corrosion.
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSet {
    pub samples: Vec<SegmentSample>,
    pub seed: u64,
    /// Corroded segments across the training images.
    pub n_pos: usize,
    pub n_neg_selected: usize,
    pub n_neg_available: usize,
}

impl TrainingSet {
    /// Fewer than two negatives per positive were available.
    pub fn is_imbalanced(&self) -> bool {
        self.n_neg_selected < NEGATIVES_PER_POSITIVE * self.n_pos
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Builds the balanced, shuffled training set from the training images' grid labels.
pub fn ciss(annotations: &[GridAnnotation], grid: &GridSpec, seed: u64) -> Result<TrainingSet> {
    if annotations.is_empty() {
        return Err(Error::Validation("no training images given".into()));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for ann in annotations {
        if ann.n != grid.n {
            return Err(Error::Validation(format!(
                "{}: annotation has n={} but the grid has n={}",
                ann.image_id, ann.n, grid.n
            )));
        }
        for index in grid.indices() {
            let label = ann.corroded_cells.contains(&index);
            let sample = SegmentSample {
                image_id: ann.image_id.clone(),
                index,
                label,
            };
            if label {
                positives.push(sample);
            } else {
                negatives.push(sample);
            }
        }
    }
    let n_pos = positives.len();
    if n_pos == 0 {
        return Err(Error::Validation(
            "no positive samples: the training images have no corrosion cells".into(),
        ));
    }
    let n_neg_available = negatives.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    negatives.shuffle(&mut rng);
    let wanted = NEGATIVES_PER_POSITIVE * n_pos;
    if n_neg_available < wanted {
        log::warn!(
            "only {n_neg_available} non-corrosion segments for {n_pos} corrosion segments \
             (wanted {wanted}); using all of them"
        );
    }
    negatives.truncate(wanted);
    let n_neg_selected = negatives.len();
    let mut samples = positives;
    samples.append(&mut negatives);
    samples.shuffle(&mut rng);
    Ok(TrainingSet {
        samples,
        seed,
        n_pos,
        n_neg_selected,
        n_neg_available,
    })
}

/// Seeded split of a training set into `floor(fraction * N)` training and
/// the remaining validation samples. No stratification.
pub fn train_validation_split(
    ts: &TrainingSet,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<SegmentSample>, Vec<SegmentSample>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {fraction}"
        )));
    }
    if ts.samples.is_empty() {
        return Err(Error::Validation("cannot split an empty training set".into()));
    }
    let mut order: Vec<usize> = (0..ts.samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (fraction * ts.samples.len() as f64).floor() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| ts.samples[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

/// Provides full-resolution images by id.
pub trait ImageSource {
    fn load(&self, image_id: &str) -> Result<RgbImage>;
}

impl ImageSource for HashMap<String, RgbImage> {
    fn load(&self, image_id: &str) -> Result<RgbImage> {
        self.get(image_id)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("unknown image `{image_id}`")))
    }
}

/// Images stored as `<dir>/<image_id>.png` (or `.ppm`).
#[derive(Debug, Clone)]
pub struct ImageDir {
    pub dir: PathBuf,
}

impl ImageSource for ImageDir {
    fn load(&self, image_id: &str) -> Result<RgbImage> {
        for ext in ["png", "ppm"] {
            let path = self.dir.join(format!("{image_id}.{ext}"));
            if path.exists() {
                return load_rgb(&path);
            }
        }
        Err(Error::Validation(format!(
            "no image file for `{image_id}` in {}",
            self.dir.display()
        )))
    }
}

/// Pixels of segment `idx`.
pub fn crop_segment(image: &RgbImage, grid: &GridSpec, idx: SegmentIndex) -> RgbImage {
    let (x0, y0, _, _) = grid.segment_pixels(idx);
    image::imageops::crop_imm(image, x0, y0, grid.seg_width, grid.seg_height).to_image()
}

/// Materializes the crops of `samples`, loading each source image once.
/// The callback receives crops in sample order.
pub fn for_each_crop(
    samples: &[SegmentSample],
    grid: &GridSpec,
    source: &dyn ImageSource,
    mut f: impl FnMut(usize, &SegmentSample, RgbImage) -> Result<()>,
) -> Result<()> {
    let mut by_image: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        let k = *slot.entry(&s.image_id).or_insert_with(|| {
            by_image.push((&s.image_id, Vec::new()));
            by_image.len() - 1
        });
        by_image[k].1.push(i);
    }
    for (image_id, members) in by_image {
        let image = source.load(image_id)?;
        grid.check_image(image.width(), image.height())
            .map_err(|e| Error::Validation(format!("{image_id}: {e}")))?;
        for i in members {
            f(i, &samples[i], crop_segment(&image, grid, samples[i].index))?;
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    image_id: String,
    x: u32,
    y: u32,
    label: u8,
}

/// Writes the ordered manifest `image_id,x,y,label`.
pub fn write_manifest(samples: &[SegmentSample], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for s in samples {
        w.serialize(ManifestRecord {
            image_id: s.image_id.clone(),
            x: s.index.x,
            y: s.index.y,
            label: s.label as u8,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SegmentSample>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize::<ManifestRecord>()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            if rec.label > 1 || rec.x == 0 || rec.y == 0 {
                return Err(Error::Validation(format!(
                    "{}: bad manifest record for {}",
                    path.display(),
                    rec.image_id
                )));
            }
            Ok(SegmentSample {
                image_id: rec.image_id,
                index: SegmentIndex { x: rec.x, y: rec.y },
                label: rec.label == 1,
            })
        })
        .collect()
}

/// Writes each sample's crop as `<dir>/<image_id>_<x>_<y>.png`.
pub fn write_crops(
    samples: &[SegmentSample],
    grid: &GridSpec,
    source: &dyn ImageSource,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for_each_crop(samples, grid, source, |_, s, crop| {
        save_png(
            &crop,
            &dir.join(format!("{}_{}_{}.png", s.image_id, s.index.x, s.index.y)),
        )
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::parse(path.display().to_string(), e)
}
