//! Object-mask detection: the predicted target-object polygon and its
//! confidence for each image, read from an external detector's files or
//! produced by a color-threshold baseline.

use std::collections::{BTreeMap, VecDeque};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::annotation::{select_object_polygon, LabelMeDocument, LabelMeShape};
use crate::error::{Error, Result};
use crate::geometry::{rasterize_polygon, BoundingBox, Point, PolygonMask};

/// Predicted object: outline, its bounding box and `conf_o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub label: String,
    pub mask: PolygonMask,
    pub bbox: BoundingBox,
    pub conf_o: f64,
    /// Rasterized mask area in pixels.
    pub area_px: u64,
}

impl DetectedObject {
    pub fn new(
        image_id: impl Into<String>,
        image_width: u32,
        image_height: u32,
        label: impl Into<String>,
        mask: PolygonMask,
        conf_o: f64,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if !(0.0..=1.0).contains(&conf_o) {
            return Err(Error::Validation(format!(
                "{image_id}: detection confidence {conf_o} is outside [0, 1]"
            )));
        }
        let mask = mask.clamped(image_width, image_height)?;
        let area_px = rasterize_polygon(&mask, image_width, image_height).area_px();
        if area_px == 0 {
            return Err(Error::Validation(format!(
                "{image_id}: detected mask covers no pixels"
            )));
        }
        Ok(Self {
            bbox: mask.bbox()?,
            image_id,
            image_width,
            image_height,
            label: label.into(),
            mask,
            conf_o,
            area_px,
        })
    }

    /// LabelMe document with a top-level `confidence`.
    pub fn to_document(&self) -> LabelMeDocument {
        LabelMeDocument {
            image_path: format!("{}.png", self.image_id),
            image_width: self.image_width,
            image_height: self.image_height,
            shapes: vec![LabelMeShape {
                label: self.label.clone(),
                points: self.mask.vertices().iter().map(|p| [p.x, p.y]).collect(),
                shape_type: "polygon".into(),
            }],
            confidence: Some(self.conf_o),
        }
    }
}

/// Supplies at most one object detection per image; `None` means no object was found.
pub trait MaskProvider: Sync {
    fn detect(&self, image_id: &str, image: &RgbImage) -> Result<Option<DetectedObject>>;
}

/// Parses one predicted-mask document.
pub fn parse_predicted_mask(document: &str, target_label: Option<&str>) -> Result<DetectedObject> {
    let doc = LabelMeDocument::parse(document)?;
    let conf = doc.confidence.ok_or_else(|| {
        Error::Validation(format!("{}: predicted mask has no confidence", doc.image_path))
    })?;
    let (label, mask) = select_object_polygon(&doc, target_label)?;
    DetectedObject::new(doc.image_id(), doc.image_width, doc.image_height, label, mask, conf)
}

/// Predicted masks keyed by image id. Images without an entry have no detection.
pub fn load_external_masks<'a>(
    documents: impl IntoIterator<Item = &'a str>,
    target_label: Option<&str>,
) -> Result<BTreeMap<String, DetectedObject>> {
    let mut out = BTreeMap::new();
    for doc in documents {
        let det = parse_predicted_mask(doc, target_label)?;
        if out.contains_key(&det.image_id) {
            return Err(Error::Validation(format!(
                "{}: more than one predicted mask",
                det.image_id
            )));
        }
        out.insert(det.image_id.clone(), det);
    }
    Ok(out)
}

/// Detections read from files.
#[derive(Debug, Clone, Default)]
pub struct ExternalMasks(pub BTreeMap<String, DetectedObject>);

impl MaskProvider for ExternalMasks {
    fn detect(&self, image_id: &str, _: &RgbImage) -> Result<Option<DetectedObject>> {
        Ok(self.0.get(image_id).cloned())
    }
}

/// Target color with a per-channel tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetColorSpec {
    pub color: [u8; 3],
    pub tolerance: u8,
    /// Label given to the detection.
    pub label: String,
}

impl TargetColorSpec {
    pub fn new(color: [u8; 3], tolerance: u8) -> Self {
        Self {
            color,
            tolerance,
            label: "object".into(),
        }
    }

    fn matches(&self, rgb: [u8; 3]) -> bool {
        (0..3).all(|c| rgb[c].abs_diff(self.color[c]) <= self.tolerance)
    }
}

/// Threshold the image around `spec.color`, keep the largest 4-connected
/// component (first in scan order on ties) and return its convex hull with
/// `conf_o = component pixels / hull pixels`.
pub fn baseline_detect(
    image_id: &str,
    image: &RgbImage,
    spec: &TargetColorSpec,
) -> Result<Option<DetectedObject>> {
    let (w, h) = image.dimensions();
    let (wu, hu) = (w as usize, h as usize);
    let hit: Vec<bool> = image.pixels().map(|p| spec.matches(p.0)).collect();
    let mut component = vec![u32::MAX; wu * hu];
    let mut best: Option<(u32, usize)> = None;
    let mut next_id = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..wu * hu {
        if !hit[start] || component[start] != u32::MAX {
            continue;
        }
        let id = next_id;
        next_id += 1;
        component[start] = id;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % wu, i / wu);
            let mut visit = |j: usize| {
                if hit[j] && component[j] == u32::MAX {
                    component[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < wu {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - wu);
            }
            if y + 1 < hu {
                visit(i + wu);
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((id, size));
        }
    }
    let Some((id, size)) = best else {
        return Ok(None);
    };
    // row extremes are enough to span the hull of all pixel squares
    let mut corners = Vec::new();
    for y in 0..hu {
        let row = &component[y * wu..(y + 1) * wu];
        let Some(lo) = row.iter().position(|&c| c == id) else {
            continue;
        };
        let hi = row.iter().rposition(|&c| c == id).unwrap();
        let (fy, lo, hi) = (y as f64, lo as f64, (hi + 1) as f64);
        corners.extend([
            Point::new(lo, fy),
            Point::new(lo, fy + 1.0),
            Point::new(hi, fy),
            Point::new(hi, fy + 1.0),
        ]);
    }
    let mask = PolygonMask::new(convex_hull(corners))?;
    let hull_px = rasterize_polygon(&mask, w, h).area_px();
    let conf = (size as f64 / hull_px as f64).min(1.0);
    DetectedObject::new(image_id, w, h, spec.label.clone(), mask, conf).map(Some)
}

/// Andrew's monotone chain; collinear points are dropped.
pub fn convex_hull(mut points: Vec<Point>) -> Vec<Point> {
    points.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    points.dedup();
    if points.len() < 3 {
        return points;
    }
    let cross = |o: Point, a: Point, b: Point| (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    let mut lower: Vec<Point> = Vec::new();
    for &p in &points {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in points.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Detector using [`baseline_detect`].
#[derive(Debug, Clone)]
pub struct BaselineDetector {
    pub spec: TargetColorSpec,
}

impl MaskProvider for BaselineDetector {
    fn detect(&self, image_id: &str, image: &RgbImage) -> Result<Option<DetectedObject>> {
        baseline_detect(image_id, image, &self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn doc(points: &str, conf: &str) -> String {
        format!(
            r#"{{"imagePath":"t1.png","imageWidth":100,"imageHeight":100,{conf}
               "shapes":[{{"label":"tower","points":{points},"shape_type":"polygon"}}]}}"#
        )
    }

    #[test]
    fn external_mask_parsing() {
        let d = doc("[[10,10],[50,10],[50,60],[10,60]]", r#""confidence":0.93,"#);
        let map = load_external_masks([d.as_str()], Some("tower")).unwrap();
        let det = &map["t1"];
        assert_eq!(det.conf_o, 0.93);
        assert_eq!(det.area_px, 40 * 50);
        assert_eq!(det.bbox, BoundingBox::new(10.0, 10.0, 50.0, 60.0).unwrap());
        let reparsed = parse_predicted_mask(&det.to_document().to_json(), Some("tower")).unwrap();
        assert_eq!(&reparsed, det);
    }

    #[test]
    fn zero_confidence_is_accepted() {
        let d = doc("[[10,10],[50,10],[50,60]]", r#""confidence":0.0,"#);
        assert_eq!(parse_predicted_mask(&d, None).unwrap().conf_o, 0.0);
    }

    #[test]
    fn bad_predictions_rejected() {
        assert!(parse_predicted_mask(&doc("[[10,10],[50,10]]", r#""confidence":0.5,"#), None).is_err());
        assert!(parse_predicted_mask(&doc("[[10,10],[50,10],[50,60]]", r#""confidence":1.5,"#), None).is_err());
        assert!(parse_predicted_mask(&doc("[[10,10],[50,10],[50,60]]", ""), None).is_err());
    }

    #[test]
    fn all_white_image_has_no_detection() {
        let img = RgbImage::from_pixel(20, 20, Rgb([255, 255, 255]));
        let spec = TargetColorSpec::new([60, 60, 60], 20);
        assert!(baseline_detect("w", &img, &spec).unwrap().is_none());
    }

    #[test]
    fn largest_component_wins() {
        let mut img = RgbImage::from_pixel(60, 60, Rgb([255, 255, 255]));
        // 25x20 = 500 px block and a 4x5 = 20 px block
        for y in 5..25 {
            for x in 30..55 {
                img.put_pixel(x, y, Rgb([60, 60, 60]));
            }
        }
        for y in 40..45 {
            for x in 2..6 {
                img.put_pixel(x, y, Rgb([60, 60, 60]));
            }
        }
        let det = baseline_detect("b", &img, &TargetColorSpec::new([60, 60, 60], 10))
            .unwrap()
            .unwrap();
        assert_eq!(det.bbox, BoundingBox::new(30.0, 5.0, 55.0, 25.0).unwrap());
        assert_eq!(det.area_px, 500);
        assert_eq!(det.conf_o, 1.0);
    }

    #[test]
    fn hull_drops_collinear_points() {
        let pts = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(2.0, 2.0),
            Point::new(0.0, 2.0),
            Point::new(1.0, 1.0),
        ];
        assert_eq!(convex_hull(pts).len(), 4);
    }
}
