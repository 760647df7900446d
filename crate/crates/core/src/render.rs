//! Overlay of segment decisions and the structure outline.

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::geometry::{BinaryGridMatrix, GridSpec, PolygonMask};

pub const TINT: [u8; 3] = [255, 0, 0];
pub const OUTLINE: [u8; 3] = [255, 255, 0];

/// Copies `image`, blends corroded cells halfway toward [`TINT`] and, when a
/// mask is given, traces its outline in [`OUTLINE`].
pub fn render_overlay(
    image: &RgbImage,
    decisions: &BinaryGridMatrix,
    grid: &GridSpec,
    mask: Option<&PolygonMask>,
) -> Result<RgbImage> {
    grid.check_image(image.width(), image.height())?;
    if decisions.n() != grid.n {
        return Err(crate::Error::Validation(format!(
            "decision matrix is {0}x{0} but the grid is {1}x{1}",
            decisions.n(),
            grid.n
        )));
    }
    let mut out = image.clone();
    for (idx, &corroded) in decisions.iter() {
        if !corroded {
            continue;
        }
        let (x0, y0, x1, y1) = grid.segment_pixels(idx);
        for y in y0..y1 {
            for x in x0..x1 {
                let p = out.get_pixel_mut(x, y);
                for (v, t) in p.0.iter_mut().zip(TINT) {
                    *v = ((*v as u16 + t as u16) / 2) as u8;
                }
            }
        }
    }
    if let Some(mask) = mask {
        let v = mask.vertices();
        for i in 0..v.len() {
            let (a, b) = (v[i], v[(i + 1) % v.len()]);
            draw_line(&mut out, (a.x, a.y), (b.x, b.y));
        }
    }
    Ok(out)
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64)) {
    let (w, h) = img.dimensions();
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as u32;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (a.0 + (b.0 - a.0) * t).floor();
        let y = (a.1 + (b.1 - a.1) * t).floor();
        // vertices on the far image edge map to the last pixel
        let x = (x.max(0.0) as u32).min(w - 1);
        let y = (y.max(0.0) as u32).min(h - 1);
        img.put_pixel(x, y, Rgb(OUTLINE));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SegmentIndex;

    #[test]
    fn tint_stays_in_cell() {
        let grid = GridSpec::new(40, 40, 4).unwrap();
        let img = RgbImage::from_pixel(40, 40, Rgb([100, 100, 100]));
        let mut d = BinaryGridMatrix::filled(4, false);
        d.set(SegmentIndex { x: 2, y: 3 }, true);
        let out = render_overlay(&img, &d, &grid, None).unwrap();
        assert_eq!(out.dimensions(), img.dimensions());
        for (x, y, p) in out.enumerate_pixels() {
            let inside = (20..30).contains(&x) && (10..20).contains(&y);
            assert_eq!(p != img.get_pixel(x, y), inside, "pixel ({x}, {y})");
        }
    }

    #[test]
    fn outline_only_with_mask() {
        let grid = GridSpec::new(20, 20, 2).unwrap();
        let img = RgbImage::from_pixel(20, 20, Rgb([0, 0, 0]));
        let d = BinaryGridMatrix::filled(2, false);
        assert_eq!(render_overlay(&img, &d, &grid, None).unwrap(), img);
        let mask = PolygonMask::rectangle(2.0, 2.0, 20.0, 20.0).unwrap();
        let out = render_overlay(&img, &d, &grid, Some(&mask)).unwrap();
        assert_eq!(out.get_pixel(2, 2).0, OUTLINE);
        assert_eq!(out.get_pixel(19, 19).0, OUTLINE);
        assert_eq!(out.get_pixel(10, 10).0, [0, 0, 0]);
    }
}
