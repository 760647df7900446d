//! Grid segmentation geometry, label/confidence matrices and polygon rasterization.
//!
//! Segment indices are 1-based on the public surface (`x` = row,
//! `y` = column) and 0-based internally. Polygon rasterization uses a
//! scanline even-odd fill that samples pixel centers, so an axis-aligned
//! rectangle with integer corners covers exactly its integer area.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity and pixel dimensions of one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDescriptor {
    pub image_id: String,
    pub width_px: u32,
    pub height_px: u32,
    pub channels: u8,
}

impl ImageDescriptor {
    pub fn new(image_id: impl Into<String>, width_px: u32, height_px: u32) -> Result<Self> {
        if width_px == 0 || height_px == 0 {
            return Err(Error::Validation(format!(
                "image dimensions must be positive, got {width_px}x{height_px}"
            )));
        }
        Ok(Self {
            image_id: image_id.into(),
            width_px,
            height_px,
            channels: 3,
        })
    }
}

/// What to do when the image size is not a multiple of `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RemainderPolicy {
    /// Refuse the configuration.
    #[default]
    Reject,
    /// Drop the rightmost columns and bottom rows that do not fill a segment.
    Crop,
}

/// The `n x n` segmentation of a `W x H` image into `w x h` segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub image_width: u32,
    pub image_height: u32,
    pub n: u32,
    pub seg_width: u32,
    pub seg_height: u32,
    pub policy: RemainderPolicy,
}

impl GridSpec {
    /// Grid for an image whose sides must be divisible by `n`.
    pub fn new(image_width: u32, image_height: u32, n: u32) -> Result<Self> {
        Self::with_policy(image_width, image_height, n, RemainderPolicy::Reject)
    }

    pub fn with_policy(
        image_width: u32,
        image_height: u32,
        n: u32,
        policy: RemainderPolicy,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("grid size n must be at least 1".into()));
        }
        if image_width == 0 || image_height == 0 {
            return Err(Error::Config(format!(
                "image dimensions must be positive, got {image_width}x{image_height}"
            )));
        }
        if image_width < n || image_height < n {
            return Err(Error::Config(format!(
                "image {image_width}x{image_height} is smaller than a {n}x{n} grid"
            )));
        }
        let divisible = image_width.is_multiple_of(n) && image_height.is_multiple_of(n);
        if !divisible && policy == RemainderPolicy::Reject {
            return Err(Error::Config(format!(
                "image {image_width}x{image_height} is not divisible into a {n}x{n} grid \
                 (use the crop remainder policy to drop the remainder)"
            )));
        }
        Ok(Self {
            image_width,
            image_height,
            n,
            seg_width: image_width / n,
            seg_height: image_height / n,
            policy,
        })
    }

    /// Number of segments, `n^2`.
    pub fn segment_count(&self) -> usize {
        (self.n as usize) * (self.n as usize)
    }

    /// Width and height actually covered by segments.
    pub fn covered_size(&self) -> (u32, u32) {
        (self.seg_width * self.n, self.seg_height * self.n)
    }

    /// Whether an image of the given size can be segmented with this grid.
    pub fn check_image(&self, width: u32, height: u32) -> Result<()> {
        if width == self.image_width && height == self.image_height {
            return Ok(());
        }
        Err(Error::Validation(format!(
            "image is {width}x{height} but the grid expects {}x{}",
            self.image_width, self.image_height
        )))
    }

    pub fn index(&self, x: u32, y: u32) -> Result<SegmentIndex> {
        SegmentIndex::new(x, y, self.n)
    }

    /// All segment indices in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = SegmentIndex> + '_ {
        let n = self.n;
        (1..=n).flat_map(move |x| (1..=n).map(move |y| SegmentIndex { x, y }))
    }

    /// Pixel rectangle of segment `(x, y)`: columns `[(y-1)w, yw)`, rows `[(x-1)h, xh)`.
    pub fn segment_rect(&self, idx: SegmentIndex) -> Result<BoundingBox> {
        if idx.x == 0 || idx.y == 0 || idx.x > self.n || idx.y > self.n {
            return Err(Error::Validation(format!(
                "segment ({}, {}) outside a {}x{} grid",
                idx.x, idx.y, self.n, self.n
            )));
        }
        let (w, h) = (self.seg_width as f64, self.seg_height as f64);
        Ok(BoundingBox {
            x_min: (idx.y - 1) as f64 * w,
            y_min: (idx.x - 1) as f64 * h,
            x_max: idx.y as f64 * w,
            y_max: idx.x as f64 * h,
        })
    }

    /// Integer pixel rectangle `(x0, y0, x1, y1)` of a segment, end-exclusive.
    pub fn segment_pixels(&self, idx: SegmentIndex) -> (u32, u32, u32, u32) {
        let x0 = (idx.y - 1) * self.seg_width;
        let y0 = (idx.x - 1) * self.seg_height;
        (x0, y0, x0 + self.seg_width, y0 + self.seg_height)
    }
}

/// 1-based segment index; `x` is the row, `y` the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentIndex {
    pub x: u32,
    pub y: u32,
}

impl SegmentIndex {
    pub fn new(x: u32, y: u32, n: u32) -> Result<Self> {
        if x == 0 || y == 0 || x > n || y > n {
            return Err(Error::Validation(format!(
                "segment ({x}, {y}) outside a {n}x{n} grid"
            )));
        }
        Ok(Self { x, y })
    }

    /// Row-major offset into a flattened `n x n` matrix.
    pub fn offset(&self, n: u32) -> usize {
        ((self.x - 1) * n + (self.y - 1)) as usize
    }

    pub fn from_offset(offset: usize, n: u32) -> Self {
        let n = n as usize;
        Self {
            x: (offset / n + 1) as u32,
            y: (offset % n + 1) as u32,
        }
    }
}

/// Square `n x n` matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMatrix<T> {
    n: u32,
    cells: Vec<T>,
}

/// Per-segment binary labels: ground truth, decisions, `tB`.
pub type BinaryGridMatrix = GridMatrix<bool>;
/// Per-segment confidences in `[0, 1]`: scorer output, `tI`.
pub type ConfidenceGridMatrix = GridMatrix<f64>;

impl<T: Clone> GridMatrix<T> {
    pub fn filled(n: u32, value: T) -> Self {
        Self {
            n,
            cells: vec![value; (n as usize) * (n as usize)],
        }
    }
}

impl<T> GridMatrix<T> {
    /// Inverse of [`GridMatrix::flatten`].
    pub fn unflatten(n: u32, cells: Vec<T>) -> Result<Self> {
        let expected = (n as usize) * (n as usize);
        if n == 0 || cells.len() != expected {
            return Err(Error::Validation(format!(
                "expected {expected} cells for a {n}x{n} matrix, got {}",
                cells.len()
            )));
        }
        Ok(Self { n, cells })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn get(&self, idx: SegmentIndex) -> &T {
        &self.cells[idx.offset(self.n)]
    }

    pub fn set(&mut self, idx: SegmentIndex, value: T) {
        let offset = idx.offset(self.n);
        self.cells[offset] = value;
    }

    /// Row-major view of the cells (x outer, y inner).
    pub fn as_slice(&self) -> &[T] {
        &self.cells
    }

    pub fn iter(&self) -> impl Iterator<Item = (SegmentIndex, &T)> {
        let n = self.n;
        self.cells
            .iter()
            .enumerate()
            .map(move |(i, v)| (SegmentIndex::from_offset(i, n), v))
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> GridMatrix<U> {
        GridMatrix {
            n: self.n,
            cells: self.cells.iter().map(f).collect(),
        }
    }
}

impl<T: Clone> GridMatrix<T> {
    /// Row-major flattening to `n^2` elements.
    pub fn flatten(&self) -> Vec<T> {
        self.cells.clone()
    }
}

impl BinaryGridMatrix {
    pub fn count_ones(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }
}

impl ConfidenceGridMatrix {
    /// Confidence matrix with every cell checked to be a finite value in `[0, 1]`.
    pub fn from_confidences(n: u32, cells: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = cells
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Validation(format!(
                "confidence {v} at cell {i} is outside [0, 1]"
            )));
        }
        Self::unflatten(n, cells)
    }
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::Validation(format!(
                "degenerate bounding box ({x_min}, {y_min})-({x_max}, {y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Simple polygon in pixel coordinates (annotated or predicted object outline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct PolygonMask {
    vertices: Vec<Point>,
}

impl TryFrom<Vec<Point>> for PolygonMask {
    type Error = Error;

    fn try_from(vertices: Vec<Point>) -> Result<Self> {
        PolygonMask::new(vertices)
    }
}

impl From<PolygonMask> for Vec<Point> {
    fn from(mask: PolygonMask) -> Self {
        mask.vertices
    }
}

impl PolygonMask {
    /// Validates a polygon: at least three distinct vertices, finite
    /// coordinates, no self-intersection. Consecutive duplicates are dropped.
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        let mut cleaned: Vec<Point> = Vec::with_capacity(vertices.len());
        for p in vertices {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::Validation("polygon vertex is not finite".into()));
            }
            if cleaned.last() != Some(&p) {
                cleaned.push(p);
            }
        }
        while cleaned.len() > 1 && cleaned.first() == cleaned.last() {
            cleaned.pop();
        }
        if cleaned.len() < 3 {
            return Err(Error::Validation(format!(
                "polygon needs at least 3 distinct vertices, got {}",
                cleaned.len()
            )));
        }
        let mask = Self { vertices: cleaned };
        if mask.self_intersects() {
            return Err(Error::Validation("polygon is self-intersecting".into()));
        }
        Ok(mask)
    }

    /// Axis-aligned rectangle polygon, clockwise in image coordinates.
    pub fn rectangle(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        Self::new(vec![
            Point::new(x_min, y_min),
            Point::new(x_max, y_min),
            Point::new(x_max, y_max),
            Point::new(x_min, y_max),
        ])
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    /// Copy with every vertex clamped into `[0, W] x [0, H]`.
    pub fn clamped(&self, width: u32, height: u32) -> Result<Self> {
        let vertices = self
            .vertices
            .iter()
            .map(|p| Point::new(p.x.clamp(0.0, width as f64), p.y.clamp(0.0, height as f64)))
            .collect();
        Self::new(vertices)
    }

    /// Tight bounds of the vertices.
    pub fn bbox(&self) -> Result<BoundingBox> {
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.vertices {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        BoundingBox::new(x0, y0, x1, y1)
    }

    /// Shoelace area of the continuous polygon.
    pub fn signed_area(&self) -> f64 {
        let v = &self.vertices;
        let mut acc = 0.0;
        for i in 0..v.len() {
            let (a, b) = (v[i], v[(i + 1) % v.len()]);
            acc += a.x * b.y - b.x * a.y;
        }
        acc / 2.0
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(
            self.vertices
                .iter()
                .map(|p| Point::new(p.x + dx, p.y + dy))
                .collect(),
        )
    }

    fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let v = &self.vertices;
        (0..v.len()).map(move |i| (v[i], v[(i + 1) % v.len()]))
    }

    fn self_intersects(&self) -> bool {
        let v = &self.vertices;
        let count = v.len();
        for i in 0..count {
            let (a, b) = (v[i], v[(i + 1) % count]);
            for j in (i + 1)..count {
                // adjacent edges share a vertex by construction
                if j == i + 1 || (i == 0 && j == count - 1) {
                    continue;
                }
                let (c, d) = (v[j], v[(j + 1) % count]);
                if segments_intersect(a, b, c, d) {
                    return true;
                }
            }
        }
        false
    }
}

fn orientation(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test, including touching and collinear overlap.
fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orientation(c, d, a);
    let d2 = orientation(c, d, b);
    let d3 = orientation(a, b, c);
    let d4 = orientation(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Pixel membership of a rasterized polygon, stored as sorted disjoint spans per row.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRaster {
    width: u32,
    height: u32,
    rows: Vec<Vec<(u32, u32)>>,
    area_px: u64,
}

impl MaskRaster {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn area_px(&self) -> u64 {
        self.area_px
    }

    /// True when the polygon covers no pixel center.
    pub fn is_degenerate(&self) -> bool {
        self.area_px == 0
    }

    pub fn contains(&self, px: u32, py: u32) -> bool {
        if py >= self.height {
            return false;
        }
        self.rows[py as usize]
            .iter()
            .any(|&(a, b)| px >= a && px < b)
    }

    /// Covered spans `[start, end)` of row `py`.
    pub fn row_spans(&self, py: u32) -> &[(u32, u32)] {
        &self.rows[py as usize]
    }

    /// Number of covered pixels inside the end-exclusive rectangle.
    pub fn count_in(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> u64 {
        let (x1, y1) = (x1.min(self.width), y1.min(self.height));
        let mut total = 0u64;
        for py in y0..y1 {
            for &(a, b) in &self.rows[py as usize] {
                let lo = a.max(x0);
                let hi = b.min(x1);
                if hi > lo {
                    total += (hi - lo) as u64;
                }
            }
        }
        total
    }

    /// Number of pixels covered by both rasters (which must share dimensions).
    pub fn intersection_count(&self, other: &MaskRaster) -> u64 {
        let mut total = 0u64;
        for (ra, rb) in self.rows.iter().zip(&other.rows) {
            let (mut i, mut j) = (0, 0);
            while i < ra.len() && j < rb.len() {
                let lo = ra[i].0.max(rb[j].0);
                let hi = ra[i].1.min(rb[j].1);
                if hi > lo {
                    total += (hi - lo) as u64;
                }
                if ra[i].1 < rb[j].1 {
                    i += 1;
                } else {
                    j += 1;
                }
            }
        }
        total
    }
}

/// Scanline even-odd rasterization sampling pixel centers `(i + 0.5, j + 0.5)`.
///
/// Pixels outside the image are ignored. A polygon whose interior covers no
/// pixel center yields a raster with `is_degenerate() == true`.
pub fn rasterize_mask(mask: &PolygonMask, image: &ImageDescriptor) -> MaskRaster {
    rasterize_polygon(mask, image.width_px, image.height_px)
}

pub fn rasterize_polygon(mask: &PolygonMask, width: u32, height: u32) -> MaskRaster {
    let mut rows = vec![Vec::new(); height as usize];
    let mut area_px = 0u64;
    let (y_lo, y_hi) = mask
        .vertices
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.y), hi.max(p.y))
        });
    let first_row = ((y_lo - 0.5).ceil().max(0.0)) as u32;
    let last_row = ((y_hi - 0.5).ceil().max(0.0) as u32).min(height);
    let mut crossings: Vec<f64> = Vec::new();
    for py in first_row..last_row {
        let yc = py as f64 + 0.5;
        crossings.clear();
        for (a, b) in mask.edges() {
            if (a.y <= yc) != (b.y <= yc) {
                crossings.push(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        crossings.sort_by(|a, b| a.total_cmp(b));
        let spans = &mut rows[py as usize];
        for pair in crossings.chunks_exact(2) {
            let start = (pair[0] - 0.5).ceil().clamp(0.0, width as f64) as u32;
            let end = (pair[1] - 0.5).ceil().clamp(0.0, width as f64) as u32;
            if end > start {
                // even-odd spans from sorted crossings never overlap
                spans.push((start, end));
                area_px += (end - start) as u64;
            }
        }
    }
    MaskRaster {
        width,
        height,
        rows,
        area_px,
    }
}

/// Fraction of the pixels of `seg_rect` whose centers fall inside `mask`.
pub fn intersection_fraction(
    seg_rect: &BoundingBox,
    mask: &PolygonMask,
    image: &ImageDescriptor,
) -> Result<f64> {
    let raster = rasterize_mask(mask, image);
    raster_fraction(&raster, seg_rect)
}

/// [`intersection_fraction`] against an already rasterized mask.
pub fn raster_fraction(raster: &MaskRaster, seg_rect: &BoundingBox) -> Result<f64> {
    let x0 = seg_rect.x_min.max(0.0).round() as u32;
    let y0 = seg_rect.y_min.max(0.0).round() as u32;
    let x1 = (seg_rect.x_max.round().max(0.0) as u32).min(raster.width);
    let y1 = (seg_rect.y_max.round().max(0.0) as u32).min(raster.height);
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::Validation(
            "segment rectangle has zero pixel area inside the image".into(),
        ));
    }
    let total = (x1 - x0) as u64 * (y1 - y0) as u64;
    Ok(raster.count_in(x0, y0, x1, y1) as f64 / total as f64)
}
