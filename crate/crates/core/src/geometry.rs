//! Box arithmetic, anchor grids, IoU-based anchor matching, box coding and
//! object crop windows.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::BBox;

/// Anchor aspect ratios as width/height: 1:2, 1:1, 2:1.
pub const ASPECT_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Object scale `s = sqrt(w·h)` in pixels.
pub fn object_scale(b: &BBox) -> f64 {
    b.area().sqrt()
}

/// Feature pyramid level `P_l` with stride `2^l`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FpnLevel {
    P2,
    P3,
    P4,
    P5,
    P6,
}

impl FpnLevel {
    pub const ALL: [FpnLevel; 5] = [
        FpnLevel::P2,
        FpnLevel::P3,
        FpnLevel::P4,
        FpnLevel::P5,
        FpnLevel::P6,
    ];

    /// The `l` in `P_l`.
    pub fn number(self) -> u32 {
        self as u32 + 2
    }

    /// Position within [`FpnLevel::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn stride(self) -> usize {
        1 << self.number()
    }

    /// Side of the level's square anchor: 32, 64, 128, 256, 512.
    pub fn anchor_side(self) -> f64 {
        (32usize << self.index()) as f64
    }

    pub fn from_number(l: u32) -> Option<Self> {
        Self::ALL.get(l.checked_sub(2)? as usize).copied()
    }
}

impl fmt::Display for FpnLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.number())
    }
}

/// Anchors of one feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLevel {
    pub level: FpnLevel,
    pub stride: usize,
    /// Square-anchor sides; the anchor area is `side²`.
    pub sides: Vec<f64>,
    pub ratios: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Index of this level's first anchor in [`AnchorGrid::anchors`].
    pub start: usize,
}

impl AnchorLevel {
    pub fn per_cell(&self) -> usize {
        self.sides.len() * self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.per_cell()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global anchor index of `(y, x, a)` where `a` enumerates
    /// `(side, ratio)` pairs ratio-fastest.
    pub fn index(&self, y: usize, x: usize, a: usize) -> usize {
        self.start + (y * self.width + x) * self.per_cell() + a
    }

    pub fn anchor_box(&self, y: usize, x: usize, a: usize) -> BBox {
        let side = self.sides[a / self.ratios.len()];
        let ratio = self.ratios[a % self.ratios.len()];
        let (w, h) = (side * ratio.sqrt(), side / ratio.sqrt());
        let cx = (x as f64 + 0.5) * self.stride as f64;
        let cy = (y as f64 + 0.5) * self.stride as f64;
        BBox::from_center(cx, cy, w, h)
    }
}

/// Dense anchors laid over every selected level, ordered level-major, then
/// row, column, and anchor-in-cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub image_height: usize,
    pub image_width: usize,
    pub levels: Vec<AnchorLevel>,
    pub anchors: Vec<BBox>,
}

impl AnchorGrid {
    fn build(image_height: usize, image_width: usize, specs: Vec<(FpnLevel, usize, Vec<f64>)>) -> Self {
        let mut levels = Vec::new();
        let mut anchors = Vec::new();
        for (level, stride, sides) in specs {
            let lvl = AnchorLevel {
                level,
                stride,
                sides,
                ratios: ASPECT_RATIOS.to_vec(),
                height: image_height.div_ceil(stride),
                width: image_width.div_ceil(stride),
                start: anchors.len(),
            };
            for y in 0..lvl.height {
                for x in 0..lvl.width {
                    for a in 0..lvl.per_cell() {
                        anchors.push(lvl.anchor_box(y, x, a));
                    }
                }
            }
            levels.push(lvl);
        }
        Self {
            image_height,
            image_width,
            levels,
            anchors,
        }
    }

    /// Single-map grid (stride 16, all five anchor areas per cell) for the
    /// detector variant without a feature pyramid.
    pub fn single_level(image_height: usize, image_width: usize) -> Self {
        let sides = FpnLevel::ALL.iter().map(|l| l.anchor_side()).collect();
        Self::build(image_height, image_width, vec![(FpnLevel::P4, 16, sides)])
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn level(&self, level: FpnLevel) -> Option<&AnchorLevel> {
        self.levels.iter().find(|l| l.level == level)
    }

    /// Level record owning global anchor `index`.
    pub fn level_of(&self, index: usize) -> &AnchorLevel {
        self.levels
            .iter()
            .rev()
            .find(|l| l.start <= index)
            .expect("index within grid")
    }
}

/// One anchor per ratio and cell on each requested FPN level, with the
/// level's anchor area.
pub fn generate_anchors(image_height: usize, image_width: usize, levels: &[FpnLevel]) -> AnchorGrid {
    AnchorGrid::build(
        image_height,
        image_width,
        levels
            .iter()
            .map(|&l| (l, l.stride(), vec![l.anchor_side()]))
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub labels: Vec<AnchorLabel>,
    /// Matched ground-truth index, set for positives only.
    pub matched_gt: Vec<Option<usize>>,
    /// Encoded regression targets, set for positives only.
    pub targets: Vec<Option<[f64; 4]>>,
}

impl MatchResult {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, label: AnchorLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn indices(&self, label: AnchorLabel) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    /// Concatenates per-image results into one batch-level result.
    pub fn concat(parts: &[MatchResult]) -> MatchResult {
        let mut out = MatchResult {
            labels: Vec::new(),
            matched_gt: Vec::new(),
            targets: Vec::new(),
        };
        for p in parts {
            out.labels.extend_from_slice(&p.labels);
            out.matched_gt.extend_from_slice(&p.matched_gt);
            out.targets.extend_from_slice(&p.targets);
        }
        out
    }
}

/// Center/size box parameterization normalized by `stds`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub stds: [f64; 4],
}

impl Default for BoxCoder {
    fn default() -> Self {
        Self {
            stds: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

impl BoxCoder {
    /// Largest log-scale change applied when decoding.
    pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

    pub fn encode(&self, gt: &BBox, anchor: &BBox) -> [f64; 4] {
        let (ax, ay) = anchor.center();
        let (gx, gy) = gt.center();
        let (aw, ah) = (anchor.width(), anchor.height());
        [
            (gx - ax) / aw / self.stds[0],
            (gy - ay) / ah / self.stds[1],
            (gt.width() / aw).ln() / self.stds[2],
            (gt.height() / ah).ln() / self.stds[3],
        ]
    }

    pub fn decode(&self, deltas: [f64; 4], anchor: &BBox) -> BBox {
        let (ax, ay) = anchor.center();
        let (aw, ah) = (anchor.width(), anchor.height());
        let dx = deltas[0] * self.stds[0];
        let dy = deltas[1] * self.stds[1];
        let dw = (deltas[2] * self.stds[2]).min(Self::MAX_LOG_SCALE);
        let dh = (deltas[3] * self.stds[3]).min(Self::MAX_LOG_SCALE);
        BBox::from_center(ax + dx * aw, ay + dy * ah, aw * dw.exp(), ah * dh.exp())
    }
}

/// Standard two-threshold IoU matching with the per-GT best-anchor
/// fallback.
///
/// An anchor is positive when its best IoU is `>= pos_thr`, or when it
/// attains the highest IoU any anchor has with some ground truth (ties
/// included, provided that IoU is non-zero). Remaining anchors with best IoU
/// `< neg_thr` are negative; the rest are ignored. A positive is matched to
/// its own best ground truth (lowest index on ties).
pub fn match_boxes(
    anchors: &[BBox],
    gts: &[BBox],
    pos_thr: f64,
    neg_thr: f64,
    coder: &BoxCoder,
) -> MatchResult {
    assert!(
        (0.0..=1.0).contains(&neg_thr) && neg_thr <= pos_thr && pos_thr <= 1.0,
        "thresholds must satisfy 0 <= neg <= pos <= 1"
    );
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut matched_gt = vec![None; n];
    let mut targets = vec![None; n];
    if gts.is_empty() {
        return MatchResult {
            labels,
            matched_gt,
            targets,
        };
    }
    let mut best_gt = vec![0usize; n];
    let mut best_iou = vec![f64::NEG_INFINITY; n];
    let mut gt_best = vec![0.0f64; gts.len()];
    let mut ious = vec![0.0f64; n * gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            ious[i * gts.len() + j] = v;
            if v > best_iou[i] {
                best_iou[i] = v;
                best_gt[i] = j;
            }
            if v > gt_best[j] {
                gt_best[j] = v;
            }
        }
    }
    for i in 0..n {
        labels[i] = if best_iou[i] >= pos_thr {
            AnchorLabel::Positive
        } else if best_iou[i] < neg_thr {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
        for (j, &gb) in gt_best.iter().enumerate() {
            if gb > 0.0 && ious[i * gts.len() + j] == gb {
                labels[i] = AnchorLabel::Positive;
            }
        }
        if labels[i] == AnchorLabel::Positive {
            matched_gt[i] = Some(best_gt[i]);
            targets[i] = Some(coder.encode(&gts[best_gt[i]], &anchors[i]));
        }
    }
    MatchResult {
        labels,
        matched_gt,
        targets,
    }
}

pub fn match_anchors(
    grid: &AnchorGrid,
    gts: &[BBox],
    pos_thr: f64,
    neg_thr: f64,
    coder: &BoxCoder,
) -> MatchResult {
    match_boxes(&grid.anchors, gts, pos_thr, neg_thr, coder)
}

/// Square crop window parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    /// Maximum center shift per axis as a fraction of the window side.
    pub shift_fraction: f64,
    /// Clamp the shifted window so it still contains the whole box.
    pub keep_box_inside: bool,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            shift_fraction: 0.1,
            keep_box_inside: true,
        }
    }
}

/// Square window of side `max(w, h)` around `b`, shifted by a uniform
/// random offset in `[-f·L, f·L]` per axis. With `keep_box_inside` the
/// shifted center is clamped so the window still covers `b`; along the
/// box's longer axis that pins the shift to zero. The window may overhang
/// the image; callers zero-pad.
pub fn crop_window<R: Rng + ?Sized>(b: &BBox, cfg: &CropConfig, rng: &mut R) -> BBox {
    let side = b.width().max(b.height());
    let (cx, cy) = b.center();
    let f = cfg.shift_fraction;
    let ux: f64 = rng.random_range(-1.0..=1.0);
    let uy: f64 = rng.random_range(-1.0..=1.0);
    let mut wx = cx + ux * f * side;
    let mut wy = cy + uy * f * side;
    if cfg.keep_box_inside {
        let half = 0.5 * side;
        // Rounding can cross the bounds on the longer axis.
        let pin = |w: f64, lo: f64, hi: f64, c: f64| if lo <= hi { w.clamp(lo, hi) } else { c };
        wx = pin(wx, b.x2 - half, b.x1 + half, cx);
        wy = pin(wy, b.y2 - half, b.y1 + half, cy);
    }
    BBox::from_center(wx, wy, side, side)
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order (stable for equal scores).
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thr: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_thr {
                suppressed[j] = true;
            }
        }
    }
    keep
}
