//! Synthetic tower imagery with exact ground truth.
//!
//! Each image shows a dark lattice tower (a braced trapezoid) on a light
//! textured background, optional green clutter, rust patches on the tower
//! and optionally rust-colored distractor patches away from it. Ground truth
//! is recorded while drawing: a cell is corroded iff at least one visible
//! pixel of an on-structure patch falls inside it. Distractors are never
//! labelled, and are placed only in cells the tower does not touch.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{save_png, GridAnnotation, ObjectAnnotation};
use crate::error::{Error, Result};
use crate::geometry::{rasterize_polygon, GridSpec, MaskRaster, Point, PolygonMask};
use crate::scoring::ColorRange;

/// Every rust pixel the generator draws lies in this range, and no other
/// drawn pixel does.
pub const RUST_RANGE: ColorRange = ColorRange {
    min: [140, 50, 10],
    max: [200, 100, 50],
};

/// Nominal lattice color; lattice pixels stay within ±6 of it.
pub const LATTICE_COLOR: [u8; 3] = [70, 70, 70];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TowerSpec {
    /// Tower height as a fraction of the image height.
    pub height_frac: (f64, f64),
    /// Half of the base width as a fraction of the image width.
    pub base_half_width_frac: (f64, f64),
    /// Half of the top width as a fraction of the image width.
    pub top_half_width_frac: (f64, f64),
    pub leg_thickness_px: f64,
    pub brace_thickness_px: f64,
    /// Number of horizontal bays.
    pub bays: u32,
}

impl Default for TowerSpec {
    fn default() -> Self {
        Self {
            height_frac: (0.75, 0.9),
            base_half_width_frac: (0.14, 0.2),
            top_half_width_frac: (0.03, 0.06),
            leg_thickness_px: 3.0,
            brace_thickness_px: 2.0,
            bays: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSpec {
    /// Inclusive range of on-structure patches per image.
    pub on_structure: (u32, u32),
    /// Inclusive range of distractor patches per image.
    pub off_structure: (u32, u32),
    /// Inclusive side-length range in pixels.
    pub size_px: (u32, u32),
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            on_structure: (2, 4),
            off_structure: (0, 0),
            size_px: (4, 7),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub n: u32,
    pub tower: TowerSpec,
    pub patches: PatchSpec,
    pub clutter: bool,
    pub target_label: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            images: 12,
            width: 128,
            height: 128,
            n: 8,
            tower: TowerSpec::default(),
            patches: PatchSpec::default(),
            clutter: true,
            target_label: "tower".into(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.width, self.height, self.n)
    }

    fn validate(&self) -> Result<()> {
        self.grid()?;
        let ordered = |name: &str, (a, b): (u32, u32)| {
            if a <= b {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}: range ({a}, {b}) is reversed")))
            }
        };
        ordered("patches.on_structure", self.patches.on_structure)?;
        ordered("patches.off_structure", self.patches.off_structure)?;
        ordered("patches.size_px", self.patches.size_px)?;
        if self.patches.size_px.0 == 0 {
            return Err(Error::Config("patch size must be at least 1 px".into()));
        }
        if self.images == 0 {
            return Err(Error::Config("synthetic dataset needs at least one image".into()));
        }
        Ok(())
    }
}

/// Axis-aligned rust patch, end-exclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub on_structure: bool,
}

/// A fully specified image: tower outline, patches and texture seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub tower: PolygonMask,
    pub leg_thickness_px: f64,
    pub brace_thickness_px: f64,
    pub bays: u32,
    pub patches: Vec<Patch>,
    pub clutter: bool,
    pub texture_seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub image_id: String,
    pub image: RgbImage,
    pub grid_annotation: GridAnnotation,
    pub object: ObjectAnnotation,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Owner {
    None,
    OnRust,
    OffRust,
}

fn jitter(rng: &mut ChaCha8Rng, base: u8, amount: i32, lo: u8, hi: u8) -> u8 {
    (base as i32 + rng.gen_range(-amount..=amount)).clamp(lo as i32, hi as i32) as u8
}

fn distance_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.x + t * dx, a.y + t * dy);
    ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()
}

/// Strut centerlines with their thickness: legs, bay bars and X bracing.
fn lattice_struts(scene: &Scene) -> Vec<(Point, Point, f64)> {
    let v = scene.tower.vertices();
    // vertices: top-left, top-right, bottom-right, bottom-left
    let (tl, tr, br, bl) = (v[0], v[1], v[2], v[3]);
    let inset = scene.leg_thickness_px / 2.0;
    let lerp = |a: Point, b: Point, t: f64| Point::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t);
    let left = |t: f64| {
        let p = lerp(tl, bl, t);
        Point::new(p.x + inset, p.y)
    };
    let right = |t: f64| {
        let p = lerp(tr, br, t);
        Point::new(p.x - inset, p.y)
    };
    let mut struts = vec![
        (left(0.0), left(1.0), scene.leg_thickness_px),
        (right(0.0), right(1.0), scene.leg_thickness_px),
    ];
    let bays = scene.bays.max(1);
    for i in 0..=bays {
        let t = i as f64 / bays as f64;
        let t_clamped = t.clamp(0.01, 0.99);
        struts.push((left(t_clamped), right(t_clamped), scene.brace_thickness_px));
        if i < bays {
            let t2 = (i + 1) as f64 / bays as f64;
            struts.push((left(t), right(t2), scene.brace_thickness_px));
            struts.push((right(t), left(t2), scene.brace_thickness_px));
        }
    }
    struts
}

/// Draws a scene and records its exact annotations.
pub fn render_scene(scene: &Scene, grid: &GridSpec, target_label: &str) -> Result<SyntheticImage> {
    grid.check_image(scene.width, scene.height)?;
    if scene.tower.vertices().len() != 4 {
        return Err(Error::Validation("tower outline must have 4 vertices".into()));
    }
    let (w, h) = (scene.width, scene.height);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.texture_seed);
    let mut img = RgbImage::new(w, h);
    for p in img.pixels_mut() {
        let base = rng.gen_range(205u8..=235);
        let tint = rng.gen_range(-4i32..=4);
        *p = Rgb([
            base,
            base,
            (base as i32 + tint).clamp(200, 240) as u8,
        ]);
    }
    if scene.clutter {
        draw_clutter(&mut img, &mut rng);
    }
    let mut owner = vec![Owner::None; (w * h) as usize];
    for patch in &scene.patches {
        if patch.x1 > w || patch.y1 > h || patch.x0 >= patch.x1 || patch.y0 >= patch.y1 {
            return Err(Error::Validation(format!("patch {patch:?} outside the image")));
        }
        let base = [
            rng.gen_range(155u8..=185),
            rng.gen_range(60u8..=90),
            rng.gen_range(20u8..=40),
        ];
        for y in patch.y0..patch.y1 {
            for x in patch.x0..patch.x1 {
                let px = Rgb([
                    jitter(&mut rng, base[0], 12, RUST_RANGE.min[0], RUST_RANGE.max[0]),
                    jitter(&mut rng, base[1], 8, RUST_RANGE.min[1], RUST_RANGE.max[1]),
                    jitter(&mut rng, base[2], 8, RUST_RANGE.min[2], RUST_RANGE.max[2]),
                ]);
                img.put_pixel(x, y, px);
                owner[(y * w + x) as usize] = if patch.on_structure {
                    Owner::OnRust
                } else {
                    Owner::OffRust
                };
            }
        }
    }
    let outline = rasterize_polygon(&scene.tower, w, h);
    let struts = lattice_struts(scene);
    for y in 0..h {
        for &(a, b) in outline.row_spans(y) {
            for x in a..b {
                let c = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                if struts
                    .iter()
                    .any(|&(p, q, t)| distance_to_segment(c, p, q) <= t / 2.0)
                {
                    let shade = jitter(&mut rng, LATTICE_COLOR[0], 6, 0, 255);
                    img.put_pixel(x, y, Rgb([shade, shade, shade]));
                    owner[(y * w + x) as usize] = Owner::None;
                }
            }
        }
    }
    let mut cells = std::collections::BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            if owner[(y * w + x) as usize] == Owner::OnRust {
                let row = (y / grid.seg_height).min(grid.n - 1) + 1;
                let col = (x / grid.seg_width).min(grid.n - 1) + 1;
                cells.insert((row, col));
            }
        }
    }
    Ok(SyntheticImage {
        image_id: scene.image_id.clone(),
        grid_annotation: GridAnnotation::new(scene.image_id.clone(), grid.n, cells)?,
        object: ObjectAnnotation::new(scene.image_id.clone(), w, h, target_label, scene.tower.clone())?,
        image: img,
    })
}

fn draw_clutter(img: &mut RgbImage, rng: &mut ChaCha8Rng) {
    let (w, h) = img.dimensions();
    for _ in 0..rng.gen_range(1..=3) {
        let r = rng.gen_range(2.0..(w.min(h) as f64 / 10.0).max(3.0));
        let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let y_lo = (cy - r).floor().max(0.0) as u32;
        let y_hi = ((cy + r).ceil() as u32).min(h);
        let x_lo = (cx - r).floor().max(0.0) as u32;
        let x_hi = ((cx + r).ceil() as u32).min(w);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    let g = rng.gen_range(115u8..=150);
                    img.put_pixel(x, y, Rgb([rng.gen_range(40u8..=80), g, rng.gen_range(40u8..=80)]));
                }
            }
        }
    }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

const PLACEMENT_ATTEMPTS: usize = 2000;

fn sample_scene(spec: &SyntheticSpec, grid: &GridSpec, index: usize, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let tower_h = (sample_range(rng, spec.tower.height_frac) * h).min(h - 2.0);
    let base_hw = sample_range(rng, spec.tower.base_half_width_frac) * w;
    let top_hw = sample_range(rng, spec.tower.top_half_width_frac) * w;
    let margin = base_hw + 1.0;
    let cx = if w - 2.0 * margin > 0.0 {
        rng.gen_range(margin..=w - margin)
    } else {
        w / 2.0
    };
    let bottom = (h - 1.0 - rng.gen_range(0.0..=(h - tower_h - 1.0).max(0.0))).round();
    let top = (bottom - tower_h).round().max(0.0);
    let tower = PolygonMask::new(vec![
        Point::new(cx - top_hw, top),
        Point::new(cx + top_hw, top),
        Point::new(cx + base_hw, bottom),
        Point::new(cx - base_hw, bottom),
    ])?
    .clamped(spec.width, spec.height)?;
    let outline = rasterize_polygon(&tower, spec.width, spec.height);

    let mut patches = Vec::new();
    let on = rng.gen_range(spec.patches.on_structure.0..=spec.patches.on_structure.1);
    for _ in 0..on {
        patches.push(place_on_structure(spec, &outline, rng)?);
    }
    let off = rng.gen_range(spec.patches.off_structure.0..=spec.patches.off_structure.1);
    let mut free_cells: Vec<_> = grid
        .indices()
        .filter(|&idx| {
            let (x0, y0, x1, y1) = grid.segment_pixels(idx);
            outline.count_in(x0, y0, x1, y1) == 0
        })
        .collect();
    for _ in 0..off {
        if free_cells.is_empty() {
            return Err(Error::Config(
                "distractor patches cannot fit: no grid cell is free of the tower".into(),
            ));
        }
        let cell = free_cells.swap_remove(rng.gen_range(0..free_cells.len()));
        let (x0, y0, x1, y1) = grid.segment_pixels(cell);
        let max_side = (x1 - x0).min(y1 - y0);
        let side = rng
            .gen_range(spec.patches.size_px.0..=spec.patches.size_px.1)
            .min(max_side);
        let px = x0 + rng.gen_range(0..=(x1 - x0 - side));
        let py = y0 + rng.gen_range(0..=(y1 - y0 - side));
        patches.push(Patch {
            x0: px,
            y0: py,
            x1: px + side,
            y1: py + side,
            on_structure: false,
        });
    }
    Ok(Scene {
        image_id: format!("synth_{index:04}"),
        width: spec.width,
        height: spec.height,
        tower,
        leg_thickness_px: spec.tower.leg_thickness_px,
        brace_thickness_px: spec.tower.brace_thickness_px,
        bays: spec.tower.bays,
        patches,
        clutter: spec.clutter,
        texture_seed: rng.gen(),
    })
}

fn place_on_structure(spec: &SyntheticSpec, outline: &MaskRaster, rng: &mut ChaCha8Rng) -> Result<Patch> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let side = rng.gen_range(spec.patches.size_px.0..=spec.patches.size_px.1);
        if side > spec.width || side > spec.height {
            break;
        }
        let x0 = rng.gen_range(0..=spec.width - side);
        let y0 = rng.gen_range(0..=spec.height - side);
        if outline.count_in(x0, y0, x0 + side, y0 + side) == (side * side) as u64 {
            return Ok(Patch {
                x0,
                y0,
                x1: x0 + side,
                y1: y0 + side,
                on_structure: true,
            });
        }
    }
    Err(Error::Config(
        "corrosion patches cannot fit inside the tower; use smaller patches or a larger tower".into(),
    ))
}

/// Generates the dataset; identical specs give byte-identical output.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticImage>> {
    spec.validate()?;
    let grid = spec.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.images)
        .map(|i| {
            let scene = sample_scene(spec, &grid, i, &mut rng)?;
            render_scene(&scene, &grid, &spec.target_label)
        })
        .collect()
}

/// Writes `images/<id>.png`, `grid/<id>.json` and `objects/<id>.json` under `dir`.
pub fn write_dataset(images: &[SyntheticImage], dir: &Path) -> Result<()> {
    for sub in ["images", "grid", "objects"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in images {
        save_png(&s.image, &dir.join("images").join(format!("{}.png", s.image_id)))?;
        let grid_path = dir.join("grid").join(format!("{}.json", s.image_id));
        std::fs::write(&grid_path, s.grid_annotation.to_json()).map_err(|e| Error::io(&grid_path, e))?;
        let obj_path = dir.join("objects").join(format!("{}.json", s.image_id));
        let doc = s.object.to_document(&format!("{}.png", s.image_id));
        std::fs::write(&obj_path, doc.to_json()).map_err(|e| Error::io(&obj_path, e))?;
    }
    Ok(())
}

/// Pipeline configuration for a dataset written by [`write_dataset`] into the
/// same directory.
///
/// The baseline detector's confidence is the lattice's share of its convex
/// hull, well below 0.5 for an open lattice, so `tau_o` is lowered to 0.3.
pub fn pipeline_template(spec: &SyntheticSpec) -> String {
    format!(
        r#"seed = {seed}
out = "run"

[dataset]
images = "images"
grid_annotations = "grid"
object_annotations = "objects"
target_label = "{label}"

[grid]
n = {n}

[decision]
tau_s = 0.5
tau_i = 0.1
tau_o = 0.3

[scorer]
kind = "baseline"

[detector]
kind = "baseline"
color = [{c0}, {c1}, {c2}]
tolerance = 20

[ensemble]
folds = 5
"#,
        seed = spec.seed,
        label = spec.target_label,
        n = spec.n,
        c0 = LATTICE_COLOR[0],
        c1 = LATTICE_COLOR[1],
        c2 = LATTICE_COLOR[2],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SegmentIndex;

    fn scene_with(patches: Vec<Patch>) -> Scene {
        Scene {
            image_id: "s".into(),
            width: 64,
            height: 64,
            tower: PolygonMask::new(vec![
                Point::new(28.0, 4.0),
                Point::new(36.0, 4.0),
                Point::new(48.0, 60.0),
                Point::new(16.0, 60.0),
            ])
            .unwrap(),
            leg_thickness_px: 2.0,
            brace_thickness_px: 1.0,
            bays: 3,
            patches,
            clutter: false,
            texture_seed: 1,
        }
    }

    #[test]
    fn no_patches_no_corrosion() {
        let spec = SyntheticSpec {
            images: 3,
            patches: PatchSpec { on_structure: (0, 0), ..PatchSpec::default() },
            ..SyntheticSpec::default()
        };
        for img in synth_generate(&spec).unwrap() {
            assert!(img.grid_annotation.corroded_cells.is_empty());
        }
    }

    #[test]
    fn patch_inside_one_cell() {
        // n = 8 on 64 px: cell (3, 4) spans x 24..32, y 16..24
        let grid = GridSpec::new(64, 64, 8).unwrap();
        let patch = Patch { x0: 25, y0: 17, x1: 30, y1: 22, on_structure: true };
        let out = render_scene(&scene_with(vec![patch]), &grid, "tower").unwrap();
        let cells: Vec<_> = out.grid_annotation.corroded_cells.iter().copied().collect();
        assert_eq!(cells, vec![SegmentIndex { x: 3, y: 4 }]);
    }

    #[test]
    fn distractor_is_not_labelled() {
        let grid = GridSpec::new(64, 64, 8).unwrap();
        let patch = Patch { x0: 1, y0: 1, x1: 5, y1: 5, on_structure: false };
        let out = render_scene(&scene_with(vec![patch]), &grid, "tower").unwrap();
        assert!(out.grid_annotation.corroded_cells.is_empty());
        assert!(RUST_RANGE.contains(out.image.get_pixel(2, 2).0));
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticSpec { images: 2, seed: 5, ..SyntheticSpec::default() };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.as_raw(), y.image.as_raw());
            assert_eq!(x.grid_annotation, y.grid_annotation);
        }
    }

    #[test]
    fn oversized_patches_fail() {
        let spec = SyntheticSpec {
            patches: PatchSpec { size_px: (60, 60), ..PatchSpec::default() },
            ..SyntheticSpec::default()
        };
        assert!(matches!(synth_generate(&spec), Err(Error::Config(_))));
    }
}
