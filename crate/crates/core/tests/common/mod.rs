//! Fixtures and independent reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

pub mod batch;
pub mod grad;

use mpsr::datamodel::{BBox, Dataset};
use mpsr::detector::DetectorConfig;
use mpsr::geometry::AnchorLabel;
use mpsr::raster::ResizePolicy;
use mpsr::synthetic::{generate, ClassSpec, Shape, SyntheticSpec};
use mpsr::trainer::{Mode, TrainConfig};

/// A few-channel detector for 64-pixel images.
pub fn tiny_config(num_classes: usize) -> DetectorConfig {
    DetectorConfig {
        stem_channels: 4,
        stage_channels: [4, 6, 6, 8],
        fpn_channels: 4,
        head_hidden: 8,
        roi_size: 3,
        rpn_pre_nms: 64,
        rpn_post_nms: 16,
        resize: ResizePolicy::new(64.0, 107.0),
        ..DetectorConfig::desk(num_classes)
    }
}

pub fn tiny_train(mode: Mode) -> TrainConfig {
    TrainConfig {
        base_schedule: vec![(10, 0.01)],
        finetune_schedule: vec![(10, 0.01)],
        warmup_iters: 0,
        batch_size: 2,
        rpn_batch: 16,
        roi_batch: 8,
        ..TrainConfig::desk(mode)
    }
}

/// Three shape classes on 64×64 images.
pub fn shapes(seed: u64, instances: usize) -> Dataset {
    generate(&SyntheticSpec {
        classes: [Shape::Disk, Shape::Square, Shape::Cross]
            .iter()
            .map(|&s| ClassSpec {
                name: s.name().into(),
                shape: s,
                instances,
                scales: vec![(12.0, 1.0), (20.0, 1.0), (32.0, 1.0)],
            })
            .collect(),
        image_width: 64,
        image_height: 64,
        max_objects_per_image: 2,
        scale_jitter: 0.1,
        noise: 0.03,
        seed,
    })
    .expect("valid spec")
}

// Loss oracles: direct scalar transcriptions of the formulas.

pub fn oracle_bce(logit: f64, positive: bool) -> f64 {
    let p = 1.0 / (1.0 + (-logit).exp());
    if positive {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn oracle_smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn oracle_ce(logits: &[f64], label: usize) -> f64 {
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    -(logits[label].exp() / z).ln()
}

pub fn oracle_reg(pred: &[[f64; 4]], target: &[[f64; 4]]) -> f64 {
    let mut s = 0.0;
    for (p, t) in pred.iter().zip(target) {
        for k in 0..4 {
            s += oracle_smooth_l1(p[k] - t[k]);
        }
    }
    s
}

/// RPN loss over `N` main samples and `M` refinement samples.
pub fn oracle_rpn(
    main: &[(f64, bool)],
    reg_pred: &[[f64; 4]],
    reg_target: &[[f64; 4]],
    refine: &[(f64, bool)],
) -> f64 {
    let n = main.len() as f64;
    let m = refine.len() as f64;
    let mut cls = 0.0;
    for &(l, p) in main.iter().chain(refine) {
        cls += oracle_bce(l, p);
    }
    cls / (n + m) + oracle_reg(reg_pred, reg_target) / n
}

/// RoI loss with refinement term weight `lambda`.
pub fn oracle_roi(
    main: &[(Vec<f64>, usize)],
    reg_pred: &[[f64; 4]],
    reg_target: &[[f64; 4]],
    refine: &[(Vec<f64>, usize)],
    lambda: f64,
) -> f64 {
    let n = main.len() as f64;
    let mut cls = 0.0;
    for (l, y) in main {
        cls += oracle_ce(l, *y);
    }
    let mut out = cls / n + oracle_reg(reg_pred, reg_target) / n;
    if !refine.is_empty() {
        let mut r = 0.0;
        for (l, y) in refine {
            r += oracle_ce(l, *y);
        }
        out += lambda * r / refine.len() as f64;
    }
    out
}

// AP oracle.

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let ua = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if ua > 0.0 {
        inter / ua
    } else {
        0.0
    }
}

/// Detections as `(image, box, score)`; AP as the sum over true positives
/// of `(1/npos) · max precision at any rank at or below it`.
pub fn oracle_ap(dets: &[(usize, BBox, f64)], gts: &[Vec<BBox>], thr: f64) -> Option<f64> {
    let npos: usize = gts.iter().map(|g| g.len()).sum();
    if npos == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    // Insertion sort by descending score keeps ties in input order.
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && dets[idx[j - 1]].2 < dets[idx[j]].2 {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::new();
    for &i in &idx {
        let (img, b, _) = dets[i];
        let mut best = -1.0;
        let mut best_j = usize::MAX;
        for (j, g) in gts[img].iter().enumerate() {
            let v = oracle_iou(&b, g);
            if v > best {
                best = v;
                best_j = j;
            }
        }
        let hit = best_j != usize::MAX && best >= thr && !used[img][best_j];
        if hit {
            used[img][best_j] = true;
        }
        tp.push(hit);
    }
    let mut prec = Vec::new();
    let mut hits = 0;
    for (r, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (r + 1) as f64);
    }
    let mut ap = 0.0;
    for r in 0..tp.len() {
        if tp[r] {
            let best = prec[r..].iter().cloned().fold(0.0, f64::max);
            ap += best / npos as f64;
        }
    }
    Some(ap)
}

// Matching oracle.

/// Labels straight from the definition, one anchor at a time.
pub fn oracle_match(anchors: &[BBox], gts: &[BBox], pos: f64, neg: f64) -> Vec<(AnchorLabel, Option<usize>)> {
    let best_for_gt: Vec<f64> = gts
        .iter()
        .map(|g| anchors.iter().map(|a| oracle_iou(a, g)).fold(0.0, f64::max))
        .collect();
    anchors
        .iter()
        .map(|a| {
            if gts.is_empty() {
                return (AnchorLabel::Negative, None);
            }
            let ious: Vec<f64> = gts.iter().map(|g| oracle_iou(a, g)).collect();
            let mut arg = 0;
            for j in 1..ious.len() {
                if ious[j] > ious[arg] {
                    arg = j;
                }
            }
            let m = ious[arg];
            let fallback = (0..gts.len()).any(|j| best_for_gt[j] > 0.0 && ious[j] == best_for_gt[j]);
            if m >= pos || fallback {
                (AnchorLabel::Positive, Some(arg))
            } else if m < neg {
                (AnchorLabel::Negative, None)
            } else {
                (AnchorLabel::Ignore, None)
            }
        })
        .collect()
}
