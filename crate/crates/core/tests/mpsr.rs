use std::collections::BTreeSet;

use mpsr::datamodel::{Annotation, BBox};
use mpsr::geometry::{AnchorLabel, BoxCoder, CropConfig, FpnLevel};
use mpsr::mpsr::*;
use mpsr::raster::RgbImage;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ann(b: BBox) -> Annotation {
    Annotation {
        bbox: b,
        class_id: 0,
        image_id: "f".into(),
    }
}

#[test]
fn level_table_is_exact() {
    use FpnLevel::*;
    let rpn = [P2, P3, P4, P5, P6, P6];
    let roi = [P2, P2, P2, P3, P4, P5];
    let table = level_table();
    for i in 0..6 {
        assert_eq!(assign_levels(i), (rpn[i], roi[i]), "scale {}", PYRAMID_SIDES[i]);
        assert_eq!((table[i].rpn_level, table[i].roi_level), (rpn[i], roi[i]));
    }
    assert_eq!(PYRAMID_SIDES, [32, 64, 128, 256, 512, 800]);
}

#[test]
fn twelve_centric_positives_for_every_map() {
    for n in 2..=64 {
        for m in 2..=16 {
            let pos = select_rpn_positives(n, m);
            assert_eq!(pos.len(), 12);
            let cells: BTreeSet<(usize, usize)> = pos.iter().map(|&(y, x, _)| (y, x)).collect();
            assert_eq!(cells.len(), 4);
            let ys: BTreeSet<usize> = cells.iter().map(|c| c.0).collect();
            let xs: BTreeSet<usize> = cells.iter().map(|c| c.1).collect();
            // Two adjacent rows and columns, equidistant from the borders
            // up to one cell.
            let (y0, x0) = (*ys.first().unwrap(), *xs.first().unwrap());
            assert_eq!(ys, BTreeSet::from([y0, y0 + 1]));
            assert_eq!(xs, BTreeSet::from([x0, x0 + 1]));
            assert!((n - 2 - y0).abs_diff(y0) <= 1 && (m - 2 - x0).abs_diff(x0) <= 1);
            let ratios: BTreeSet<usize> = pos.iter().map(|p| p.2).collect();
            assert_eq!(ratios, BTreeSet::from([0, 1, 2]));
        }
    }
}

fn pyramid(b: BBox, seed: u64) -> ObjectPyramid {
    let img = RgbImage::filled(500, 375, [0.4, 0.4, 0.4]);
    build_object_pyramid(&img, &ann(b), &PyramidScaleSet::default(), &CropConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap()
}

#[test]
fn anchor_matching_on_pyramids_produces_negatives() {
    // A large object and a small one.
    for (b, seed) in [(BBox::raw(60.0, 40.0, 420.0, 340.0), 0), (BBox::raw(300.0, 200.0, 340.0, 250.0), 1)] {
        let p = pyramid(b, seed);
        let mut negatives = 0;
        for crop in &p.crops {
            let manual = manual_targets(crop, 0);
            assert_eq!((manual.positives(), manual.negatives()), (12, 0));
            let matched = anchor_match_targets(crop, 0, 0.7, 0.3, 24, &mut ChaCha8Rng::seed_from_u64(seed));
            negatives += matched.negatives();
            assert_ne!(manual.rpn_samples, matched.rpn_samples);
            assert_eq!(matched.roi_level, manual.roi_level);
        }
        assert!(negatives >= 1);
        let full = anchor_match_on_pyramids(&p, 0.7, 0.3, &BoxCoder::default());
        assert!(full.iter().any(|(_, m)| m.count(AnchorLabel::Negative) > 0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn crops_are_square_with_exact_sides(x in 0.0f64..400.0, y in 0.0f64..300.0, w in 3.0f64..100.0, h in 3.0f64..75.0, seed in any::<u64>()) {
        let p = pyramid(BBox::raw(x, y, x + w, y + h), seed);
        prop_assert!((p.window.width() - p.window.height()).abs() < 1e-9);
        for (i, c) in p.crops.iter().enumerate() {
            prop_assert_eq!(c.scale_index, i);
            prop_assert_eq!((c.pixels.width, c.pixels.height), (PYRAMID_SIDES[i], PYRAMID_SIDES[i]));
            prop_assert_eq!(c.canvas % CANVAS_MULTIPLE, 0);
            prop_assert!(c.canvas >= c.side && c.canvas - c.side < CANVAS_MULTIPLE);
            let t = manual_targets(c, 0);
            let n = c.content_cells(t.rpn_level);
            prop_assert!(t.rpn_samples.iter().all(|s| s.y < n && s.x < n && s.positive));
            prop_assert!(t.roi_content.0 <= c.canvas_cells(t.roi_level));
        }
    }
}

#[test]
fn scale_set_must_have_six_increasing_sides() {
    assert!(PyramidScaleSet::new(vec![1, 2, 3, 4, 5]).is_err());
    assert!(PyramidScaleSet::new(vec![1, 2, 3, 3, 5, 6]).is_err());
    assert!(PyramidScaleSet::new(vec![0, 2, 3, 4, 5, 6]).is_err());
    assert_eq!(PyramidScaleSet::default().sides(), PYRAMID_SIDES);
}
