//! Annotation ingestion: grid corrosion labels, LabelMe object polygons,
//! ground-truth label matrices and the seeded train/test split.

use std::collections::BTreeSet;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BinaryGridMatrix, BoundingBox, GridSpec, Point, PolygonMask, SegmentIndex};

/// Expert grid labels for one image: the set of corroded segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridAnnotation {
    pub image_id: String,
    pub n: u32,
    pub corroded_cells: BTreeSet<SegmentIndex>,
}

#[derive(Serialize, Deserialize)]
struct GridAnnotationDoc {
    image_id: String,
    n: u32,
    corroded_cells: Vec<[u32; 2]>,
}

impl GridAnnotation {
    pub fn new(
        image_id: impl Into<String>,
        n: u32,
        cells: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if n == 0 {
            return Err(Error::Validation(format!("{image_id}: n must be positive")));
        }
        let mut corroded_cells = BTreeSet::new();
        for (x, y) in cells {
            let idx = SegmentIndex::new(x, y, n)
                .map_err(|e| Error::Validation(format!("{image_id}: {e}")))?;
            if !corroded_cells.insert(idx) {
                return Err(Error::Validation(format!(
                    "{image_id}: duplicate corroded cell ({x}, {y})"
                )));
            }
        }
        Ok(Self {
            image_id,
            n,
            corroded_cells,
        })
    }

    /// Image-level ground truth: corroded iff at least one cell is annotated.
    pub fn is_corroded(&self) -> bool {
        !self.corroded_cells.is_empty()
    }

    pub fn to_json(&self) -> String {
        let doc = GridAnnotationDoc {
            image_id: self.image_id.clone(),
            n: self.n,
            corroded_cells: self.corroded_cells.iter().map(|c| [c.x, c.y]).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("grid annotation serializes")
    }
}

/// Parses the canonical grid-annotation document
/// `{"image_id": .., "n": .., "corroded_cells": [[x, y], ..]}`.
///
/// `expected_n` is the dataset grid size; a mismatch is an error.
pub fn parse_grid_annotation(document: &str, expected_n: Option<u32>) -> Result<GridAnnotation> {
    let doc: GridAnnotationDoc =
        serde_json::from_str(document).map_err(|e| Error::parse("grid annotation", e))?;
    if let Some(n) = expected_n {
        if doc.n != n {
            return Err(Error::Validation(format!(
                "{}: annotation uses n={} but the dataset grid has n={n}",
                doc.image_id, doc.n
            )));
        }
    }
    GridAnnotation::new(
        doc.image_id,
        doc.n,
        doc.corroded_cells.into_iter().map(|[x, y]| (x, y)),
    )
}

/// `b_xy = 1` iff segment `(x, y)` was annotated as corrosion.
pub fn build_label_matrix(ann: &GridAnnotation) -> BinaryGridMatrix {
    let mut m = BinaryGridMatrix::filled(ann.n, false);
    for &idx in &ann.corroded_cells {
        m.set(idx, true);
    }
    m
}

/// One shape entry of a LabelMe document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMeShape {
    pub label: String,
    pub points: Vec<[f64; 2]>,
    #[serde(default = "default_shape_type")]
    pub shape_type: String,
}

fn default_shape_type() -> String {
    "polygon".to_string()
}

/// The subset of the LabelMe JSON schema used for object annotations and
/// predicted masks. Predicted-mask files add a top-level `confidence`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMeDocument {
    #[serde(rename = "imagePath")]
    pub image_path: String,
    #[serde(rename = "imageWidth")]
    pub image_width: u32,
    #[serde(rename = "imageHeight")]
    pub image_height: u32,
    pub shapes: Vec<LabelMeShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl LabelMeDocument {
    pub fn parse(document: &str) -> Result<Self> {
        serde_json::from_str(document).map_err(|e| Error::parse("LabelMe document", e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("LabelMe document serializes")
    }

    /// Image id: the file stem of `imagePath`.
    pub fn image_id(&self) -> String {
        image_id_from_path(&self.image_path)
    }
}

pub fn image_id_from_path(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

impl LabelMeShape {
    /// Polygon for this shape; `rectangle` shapes (two corners) become four vertices.
    pub fn to_polygon(&self) -> Result<PolygonMask> {
        match self.shape_type.as_str() {
            "polygon" => {
                if self.points.len() < 3 {
                    return Err(Error::Validation(format!(
                        "polygon `{}` has {} points, need at least 3",
                        self.label,
                        self.points.len()
                    )));
                }
                PolygonMask::new(self.points.iter().map(|&[x, y]| Point::new(x, y)).collect())
            }
            "rectangle" => {
                let [[ax, ay], [bx, by]] = match self.points.as_slice() {
                    [a, b] => [*a, *b],
                    other => {
                        return Err(Error::Validation(format!(
                            "rectangle `{}` needs exactly 2 points, got {}",
                            self.label,
                            other.len()
                        )))
                    }
                };
                PolygonMask::rectangle(ax.min(bx), ay.min(by), ax.max(bx), ay.max(by))
            }
            other => Err(Error::Validation(format!(
                "unsupported shape_type `{other}`"
            ))),
        }
    }
}

/// Ground-truth polygon of the target object in one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAnnotation {
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub label: String,
    pub mask: PolygonMask,
    pub bbox: BoundingBox,
}

impl ObjectAnnotation {
    pub fn new(
        image_id: impl Into<String>,
        image_width: u32,
        image_height: u32,
        label: impl Into<String>,
        mask: PolygonMask,
    ) -> Result<Self> {
        let mask = mask.clamped(image_width, image_height)?;
        let bbox = mask.bbox()?;
        Ok(Self {
            image_id: image_id.into(),
            image_width,
            image_height,
            label: label.into(),
            mask,
            bbox,
        })
    }

    pub fn to_document(&self, image_path: &str) -> LabelMeDocument {
        LabelMeDocument {
            image_path: image_path.to_string(),
            image_width: self.image_width,
            image_height: self.image_height,
            shapes: vec![LabelMeShape {
                label: self.label.clone(),
                points: self.mask.vertices().iter().map(|p| [p.x, p.y]).collect(),
                shape_type: "polygon".into(),
            }],
            confidence: None,
        }
    }
}

/// Selects the target-object polygon from a parsed LabelMe document.
///
/// With `target_label = None` every shape is a candidate. Several candidates
/// resolve to the one with the largest area (first on ties) with a warning.
pub fn select_object_polygon(
    doc: &LabelMeDocument,
    target_label: Option<&str>,
) -> Result<(String, PolygonMask)> {
    let candidates: Vec<&LabelMeShape> = doc
        .shapes
        .iter()
        .filter(|s| target_label.is_none_or(|t| s.label == t))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no shape labelled `{}`",
            doc.image_path,
            target_label.unwrap_or("*")
        )));
    }
    let mut best: Option<(f64, &LabelMeShape, PolygonMask)> = None;
    for shape in &candidates {
        let poly = shape
            .to_polygon()
            .map_err(|e| Error::Validation(format!("{}: {e}", doc.image_path)))?;
        let area = poly.signed_area().abs();
        if best.as_ref().is_none_or(|(a, _, _)| area > *a) {
            best = Some((area, shape, poly));
        }
    }
    if candidates.len() > 1 {
        log::warn!(
            "{}: {} candidate object shapes, keeping the largest",
            doc.image_path,
            candidates.len()
        );
    }
    let (_, shape, poly) = best.expect("at least one candidate");
    Ok((shape.label.clone(), poly))
}

/// Parses a LabelMe object annotation and extracts the `target_label` polygon.
pub fn parse_object_annotation(document: &str, target_label: &str) -> Result<ObjectAnnotation> {
    let doc = LabelMeDocument::parse(document)?;
    let (label, mask) = select_object_polygon(&doc, Some(target_label))?;
    ObjectAnnotation::new(doc.image_id(), doc.image_width, doc.image_height, label, mask)
}

/// Seeded partition of the image ids into `k` training and `m - k` test images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

pub fn split_dataset(ids: &[String], k: usize, seed: u64) -> Result<DatasetSplit> {
    let m = ids.len();
    if k == 0 || k >= m {
        return Err(Error::Config(format!(
            "training size k={k} must satisfy 0 < k < m={m}"
        )));
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != m {
        return Err(Error::Validation("duplicate image ids in dataset".into()));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_ids = shuffled.split_off(k);
    Ok(DatasetSplit {
        train_ids: shuffled,
        test_ids,
        seed,
    })
}

/// Segment counts implied by a dataset of `m` images with `k` for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetCounts {
    pub total_segments: usize,
    pub train_segments: usize,
    pub test_segments: usize,
}

impl DatasetCounts {
    pub fn new(m: usize, k: usize, grid: &GridSpec) -> Self {
        let per_image = grid.segment_count();
        Self {
            total_segments: m * per_image,
            train_segments: k * per_image,
            test_segments: (m - k.min(m)) * per_image,
        }
    }
}

/// Loads an 8-bit RGB raster (PNG or PPM).
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}
