//! Property tests over the public API, each checked against a direct
//! recomputation rather than the implementation under test.

use std::collections::{BTreeMap, BTreeSet};

use corrdetector_core::annotation::{build_label_matrix, parse_grid_annotation, split_dataset, GridAnnotation};
use corrdetector_core::ciss::{ciss, NEGATIVES_PER_POSITIVE};
use corrdetector_core::detection::DetectedObject;
use corrdetector_core::erc::{erc_features, overlap_targets};
use corrdetector_core::geometry::{intersection_fraction, rasterize_polygon};
use corrdetector_core::metrics::{iou_bbox, precision_at_iou, slp_decide};
use corrdetector_core::scoring::{overall_confidence, ImageScoreResult};
use corrdetector_core::{
    BinaryGridMatrix, BoundingBox, ConfidenceGridMatrix, GridSpec, ImageDescriptor, PolygonMask, SegmentIndex,
};
use proptest::prelude::*;

fn cells(n: u32) -> impl Strategy<Value = BTreeSet<(u32, u32)>> {
    prop::collection::btree_set((1..=n, 1..=n), 0..=(n * n) as usize)
}

fn confidences(n: u32) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, (n * n) as usize)
}

fn rect() -> impl Strategy<Value = BoundingBox> {
    (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_round_trips_row_major(n in 1u32..=32, seed in any::<u64>()) {
        let cells: Vec<u64> = (0..(n * n) as u64).map(|i| i.wrapping_mul(seed | 1)).collect();
        let m = corrdetector_core::geometry::GridMatrix::unflatten(n, cells.clone()).unwrap();
        prop_assert_eq!(m.flatten(), cells.clone());
        for x in 1..=n {
            for y in 1..=n {
                let idx = SegmentIndex::new(x, y, n).unwrap();
                prop_assert_eq!(*m.get(idx), cells[((x - 1) * n + (y - 1)) as usize]);
                prop_assert_eq!(SegmentIndex::from_offset(idx.offset(n), n), idx);
            }
        }
    }

    #[test]
    fn segments_tile_the_image(n in 1u32..=16, sw in 1u32..=9, sh in 1u32..=9) {
        let grid = GridSpec::new(n * sw, n * sh, n).unwrap();
        let mut hits = vec![0u8; (n * sw * n * sh) as usize];
        for idx in grid.indices() {
            let (x0, y0, x1, y1) = grid.segment_pixels(idx);
            prop_assert_eq!((x1 - x0, y1 - y0), (sw, sh));
            for y in y0..y1 {
                for x in x0..x1 {
                    hits[(y * n * sw + x) as usize] += 1;
                }
            }
        }
        prop_assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn integer_rectangle_rasterizes_to_its_area(x0 in 0u32..40, y0 in 0u32..40, w in 1u32..25, h in 1u32..25) {
        let poly = PolygonMask::rectangle(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64).unwrap();
        let r = rasterize_polygon(&poly, 64, 64);
        prop_assert_eq!(r.area_px(), (w * h) as u64);
        for py in 0..64 {
            for px in 0..64 {
                let inside = px >= x0 && px < x0 + w && py >= y0 && py < y0 + h;
                prop_assert_eq!(r.contains(px, py), inside);
            }
        }
    }

    #[test]
    fn intersection_fraction_matches_pixel_count(
        (mx0, my0, mx1, my1) in (0u32..30, 0u32..30, 1u32..30, 1u32..30).prop_map(|(a, b, w, h)| (a, b, a + w, b + h)),
        (sx, sy) in (0u32..4, 0u32..4),
    ) {
        let image = ImageDescriptor::new("p", 64, 64).unwrap();
        let mask = PolygonMask::rectangle(mx0 as f64, my0 as f64, mx1 as f64, my1 as f64).unwrap();
        let seg = BoundingBox::new((sx * 16) as f64, (sy * 16) as f64, (sx * 16 + 16) as f64, (sy * 16 + 16) as f64).unwrap();
        let mut inside = 0u32;
        for y in sy * 16..sy * 16 + 16 {
            for x in sx * 16..sx * 16 + 16 {
                if x >= mx0 && x < mx1.min(64) && y >= my0 && y < my1.min(64) {
                    inside += 1;
                }
            }
        }
        let f = intersection_fraction(&seg, &mask, &image).unwrap();
        prop_assert_eq!(f, inside as f64 / 256.0);
    }

    #[test]
    fn growing_the_mask_never_lowers_the_fraction(x0 in 0u32..20, y0 in 0u32..20, w in 1u32..20, h in 1u32..20, grow in 0u32..10) {
        let image = ImageDescriptor::new("p", 48, 48).unwrap();
        let seg = BoundingBox::new(8.0, 8.0, 24.0, 24.0).unwrap();
        let small = PolygonMask::rectangle(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64).unwrap();
        let big = PolygonMask::rectangle(x0 as f64, y0 as f64, (x0 + w + grow) as f64, (y0 + h + grow) as f64).unwrap();
        let a = intersection_fraction(&seg, &small, &image).unwrap();
        let b = intersection_fraction(&seg, &big, &image).unwrap();
        prop_assert!(b >= a);
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
    }

    #[test]
    fn label_matrix_marks_exactly_the_annotated_cells(n in 1u32..=12, set in cells(12)) {
        let set: BTreeSet<_> = set.into_iter().filter(|&(x, y)| x <= n && y <= n).collect();
        let ann = GridAnnotation::new("a", n, set.iter().copied()).unwrap();
        let m = build_label_matrix(&ann);
        prop_assert_eq!(m.count_ones(), set.len());
        for (idx, &v) in m.iter() {
            prop_assert_eq!(v, set.contains(&(idx.x, idx.y)));
        }
        prop_assert_eq!(ann.is_corroded(), !set.is_empty());
        let back = parse_grid_annotation(&ann.to_json(), Some(n)).unwrap();
        prop_assert_eq!(back, ann);
    }

    #[test]
    fn split_is_a_partition(m in 2usize..80, k_frac in 0.01..0.99f64, seed in any::<u64>()) {
        let ids: Vec<String> = (0..m).map(|i| format!("img{i}")).collect();
        let k = ((m as f64 * k_frac) as usize).clamp(1, m - 1);
        let s = split_dataset(&ids, k, seed).unwrap();
        prop_assert_eq!(s.train_ids.len(), k);
        prop_assert_eq!(s.test_ids.len(), m - k);
        let mut all: Vec<_> = s.train_ids.iter().chain(&s.test_ids).cloned().collect();
        all.sort();
        let mut expected = ids.clone();
        expected.sort();
        prop_assert_eq!(all, expected);
        prop_assert_eq!(split_dataset(&ids, k, seed).unwrap(), s);
    }

    #[test]
    fn ciss_keeps_every_positive_and_at_most_two_negatives_each(
        labels in prop::collection::vec(cells(4), 1..8),
        seed in any::<u64>(),
    ) {
        prop_assume!(labels.iter().any(|c| !c.is_empty()));
        let grid = GridSpec::new(16, 16, 4).unwrap();
        let anns: Vec<_> = labels
            .iter()
            .enumerate()
            .map(|(i, c)| GridAnnotation::new(format!("i{i}"), 4, c.iter().copied()).unwrap())
            .collect();
        let pos: usize = labels.iter().map(|c| c.len()).sum();
        let neg = labels.len() * 16 - pos;
        let set = ciss(&anns, &grid, seed).unwrap();
        prop_assert_eq!(set.n_pos, pos);
        prop_assert_eq!(set.n_neg_available, neg);
        prop_assert_eq!(set.n_neg_selected, neg.min(NEGATIVES_PER_POSITIVE * pos));
        prop_assert_eq!(set.len(), set.n_pos + set.n_neg_selected);
        let truth: BTreeMap<&str, &BTreeSet<(u32, u32)>> =
            anns.iter().map(|a| a.image_id.as_str()).zip(labels.iter()).collect();
        let mut seen = BTreeSet::new();
        for s in &set.samples {
            prop_assert!(seen.insert((s.image_id.clone(), s.index)));
            prop_assert_eq!(s.label, truth[s.image_id.as_str()].contains(&(s.index.x, s.index.y)));
        }
        prop_assert_eq!(set.samples.iter().filter(|s| s.label).count(), pos);
    }

    #[test]
    fn image_confidence_counts_cells_at_or_above_threshold(n in 1u32..=10, cs in confidences(10), tau in 0.0..=1.0f64) {
        let cs: Vec<f64> = cs.into_iter().take((n * n) as usize).collect();
        let m = ConfidenceGridMatrix::from_confidences(n, cs.clone()).unwrap();
        let r = ImageScoreResult::from_confidences("i", m.clone(), tau);
        let expected = cs.iter().filter(|&&c| c >= tau).count() as f64 / (n * n) as f64;
        prop_assert_eq!(r.conf_c, expected);
        prop_assert_eq!(overall_confidence(&slp_decide(&m, tau)), expected);
    }

    #[test]
    fn raising_tau_s_never_adds_corroded_cells(cs in confidences(6), a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let m = ConfidenceGridMatrix::from_confidences(6, cs).unwrap();
        let strict = slp_decide(&m, hi);
        let loose = slp_decide(&m, lo);
        for ((_, s), (_, l)) in strict.iter().zip(loose.iter()) {
            prop_assert!(!*s || *l);
        }
    }

    #[test]
    fn bbox_iou_is_symmetric_and_bounded(a in rect(), b in rect()) {
        let ab = iou_bbox(&a, &b);
        prop_assert_eq!(ab, iou_bbox(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou_bbox(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn precision_never_rises_with_the_iou_threshold(
        pairs in prop::collection::vec((0.0..=1.0f64, any::<bool>()), 1..40),
        t1 in 0.0..=1.0f64,
        t2 in 0.0..=1.0f64,
    ) {
        prop_assume!(pairs.iter().any(|p| p.1));
        let (ious, acc): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(precision_at_iou(&ious, &acc, hi).unwrap() <= precision_at_iou(&ious, &acc, lo).unwrap());
    }

    #[test]
    fn overlap_targets_agree(fraction in 0.0..=1.0f64, conf in 0.0..=1.0f64, th in 0.0..=1.0f64) {
        let (tb, ti) = overlap_targets(fraction, conf, th);
        prop_assert_eq!(tb, fraction >= th);
        prop_assert_eq!(ti, if tb { fraction * conf } else { 0.0 });
    }

    #[test]
    fn erc_rows_cover_every_segment(
        images in prop::collection::vec((confidences(4), cells(4), prop::option::of((0u32..20, 0u32..20, 1u32..20, 1u32..20, 0.0..=1.0f64))), 1..5),
        th in 0.0..=1.0f64,
    ) {
        let grid = GridSpec::new(40, 40, 4).unwrap();
        let image = ImageDescriptor::new("x", 40, 40).unwrap();
        let mut results = Vec::new();
        let mut truths = BTreeMap::new();
        let mut dets = BTreeMap::new();
        for (i, (cs, truth, det)) in images.iter().enumerate() {
            let id = format!("i{i}");
            results.push(ImageScoreResult::from_confidences(&id, ConfidenceGridMatrix::from_confidences(4, cs.clone()).unwrap(), 0.5));
            truths.insert(id.clone(), build_label_matrix(&GridAnnotation::new(&id, 4, truth.iter().copied()).unwrap()));
            if let Some((x, y, w, h, conf)) = *det {
                let mask = PolygonMask::rectangle(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap();
                dets.insert(id.clone(), DetectedObject::new(&id, 40, 40, "tower", mask, conf).unwrap());
            }
        }
        let (fc, fb) = erc_features(&results, &dets, &truths, &grid, th).unwrap();
        prop_assert_eq!(fb.len(), images.len() * 16);
        prop_assert_eq!(fc.len(), fb.len());
        for (r, c) in fb.rows.iter().zip(&fc.rows) {
            prop_assert_eq!(r, c);
            let res = results.iter().find(|s| s.image_id == r.image_id).unwrap();
            let idx = r.segment();
            prop_assert_eq!(r.conf_c_seg, *res.cs.get(idx));
            prop_assert_eq!(r.bhat == 1, *res.b_hat.get(idx));
            prop_assert_eq!(r.truth == 1, *truths[&r.image_id].get(idx));
            let seg = grid.segment_rect(idx).unwrap();
            let (tb, ti) = match dets.get(&r.image_id) {
                Some(d) => overlap_targets(intersection_fraction(&seg, &d.mask, &image).unwrap(), d.conf_o, th),
                None => (false, 0.0),
            };
            prop_assert_eq!(r.tb == 1, tb);
            prop_assert_eq!(r.ti, ti);
        }
    }
}

#[test]
fn image_confidence_extremes() {
    let zero = BinaryGridMatrix::filled(5, false);
    let one = BinaryGridMatrix::filled(5, true);
    assert_eq!(overall_confidence(&zero), 0.0);
    assert_eq!(overall_confidence(&one), 1.0);
}
