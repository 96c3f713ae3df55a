mod common;

use common::{oracle_iou, oracle_match};
use mpsr::datamodel::BBox;
use mpsr::geometry::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0f64..200.0, 0.0f64..200.0, 1.0f64..120.0, 1.0f64..120.0).prop_map(|(x, y, w, h)| BBox::raw(x, y, x + w, y + h))
}

fn random_box<R: Rng>(rng: &mut R, w: f64, h: f64) -> BBox {
    let bw = rng.random_range(4.0..w * 0.8);
    let bh = rng.random_range(4.0..h * 0.8);
    let x = rng.random_range(0.0..w - bw);
    let y = rng.random_range(0.0..h - bh);
    BBox::raw(x, y, x + bw, y + bh)
}

proptest! {
    #[test]
    fn iou_properties(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - iou(&b, &a)).abs() < 1e-12);
        prop_assert!((v - oracle_iou(&a, &b)).abs() < 1e-12);
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn crop_window_is_square_and_bounded(b in bbox(), seed in any::<u64>(), f in 0.0f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = b.width().max(b.height());
        let free = crop_window(&b, &CropConfig { shift_fraction: f, keep_box_inside: false }, &mut rng);
        prop_assert!((free.width() - side).abs() < 1e-9 && (free.height() - side).abs() < 1e-9);
        let (cx, cy) = b.center();
        let (wx, wy) = free.center();
        prop_assert!((wx - cx).abs() <= f * side + 1e-9 && (wy - cy).abs() <= f * side + 1e-9);

        let kept = crop_window(&b, &CropConfig { shift_fraction: f, keep_box_inside: true }, &mut rng);
        let eps = 1e-9;
        prop_assert!(kept.x1 <= b.x1 + eps && kept.y1 <= b.y1 + eps && kept.x2 >= b.x2 - eps && kept.y2 >= b.y2 - eps);
        let (kx, ky) = kept.center();
        prop_assert!((kx - cx).abs() <= f * side + 1e-9 && (ky - cy).abs() <= f * side + 1e-9);
    }

    #[test]
    fn coder_round_trip(g in bbox(), a in bbox()) {
        let coder = BoxCoder::default();
        let d = coder.encode(&g, &a);
        let back = coder.decode(d, &a);
        // Large scale changes are clamped on decode.
        prop_assume!(d[2].abs() * 0.2 < BoxCoder::MAX_LOG_SCALE && d[3].abs() * 0.2 < BoxCoder::MAX_LOG_SCALE);
        for (p, q) in back.to_array().iter().zip(g.to_array()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn nms_keeps_separated_maxima(seed in any::<u64>(), n in 1usize..40, thr in 0.2f64..0.8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, 100.0, 100.0)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let keep = nms(&boxes, &scores, thr);
        for (i, &a) in keep.iter().enumerate() {
            for &b in &keep[i + 1..] {
                prop_assert!(scores[a] >= scores[b]);
                prop_assert!(iou(&boxes[a], &boxes[b]) <= thr);
            }
        }
        for j in 0..n {
            if !keep.contains(&j) {
                prop_assert!(keep.iter().any(|&k| scores[k] >= scores[j] && iou(&boxes[k], &boxes[j]) > thr));
            }
        }
    }
}

#[test]
fn anchor_counts_and_order() {
    let grid = generate_anchors(128, 192, &FpnLevel::ALL);
    let mut expected = 0;
    for lvl in &grid.levels {
        let s = lvl.level.stride();
        assert_eq!((lvl.height, lvl.width), (128usize.div_ceil(s), 192usize.div_ceil(s)));
        assert_eq!(lvl.start, expected);
        expected += lvl.len();
        let b = lvl.anchor_box(1, 2, 1);
        assert!((b.width() - lvl.level.anchor_side()).abs() < 1e-9, "1:1 anchor side");
        assert_eq!(b.center(), (2.5 * s as f64, 1.5 * s as f64));
        assert_eq!(grid.anchors[lvl.index(1, 2, 1)], b);
    }
    assert_eq!(grid.anchors.len(), expected);
    for (i, lvl) in grid.levels.iter().enumerate() {
        assert_eq!(lvl.level, FpnLevel::ALL[i]);
        assert_eq!(lvl.per_cell(), ASPECT_RATIOS.len());
        for a in 0..3 {
            let b = lvl.anchor_box(0, 0, a);
            assert!((b.area() - lvl.level.anchor_side().powi(2)).abs() < 1e-6);
            assert!((b.width() / b.height() - ASPECT_RATIOS[a]).abs() < 1e-9);
        }
    }
}

#[test]
fn matching_agrees_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let coder = BoxCoder::default();
    for case in 0..300 {
        let (h, w) = ([32, 40, 48][case % 3], [32, 64][case % 2]);
        let grid = generate_anchors(h, w, &FpnLevel::ALL);
        assert!(grid.anchors.len() <= 1000);
        let ngt = rng.random_range(0..5);
        let gts: Vec<BBox> = (0..ngt).map(|_| random_box(&mut rng, w as f64, h as f64)).collect();
        let (pos, neg) = if case % 2 == 0 { (0.7, 0.3) } else { (0.5, 0.4) };
        let got = match_anchors(&grid, &gts, pos, neg, &coder);
        let want = oracle_match(&grid.anchors, &gts, pos, neg);
        for (i, &(label, gt)) in want.iter().enumerate() {
            assert_eq!(got.labels[i], label, "case {case} anchor {i}");
            assert_eq!(got.matched_gt[i], gt, "case {case} anchor {i}");
            match gt {
                Some(j) => assert_eq!(got.targets[i], Some(coder.encode(&gts[j], &grid.anchors[i]))),
                None => assert_eq!(got.targets[i], None),
            }
        }
    }
}

#[test]
fn no_ground_truth_means_all_negative() {
    let grid = generate_anchors(64, 64, &FpnLevel::ALL);
    let m = match_anchors(&grid, &[], 0.7, 0.3, &BoxCoder::default());
    assert_eq!(m.count(AnchorLabel::Negative), grid.len());
}
