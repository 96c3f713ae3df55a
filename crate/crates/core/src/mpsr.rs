//! Object pyramids and the manual level/location selection that turns each
//! pyramid crop into positive-only refinement samples.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Annotation, BBox};
use crate::error::{Error, Result};
use crate::geometry::{
    crop_window, generate_anchors, match_anchors, AnchorGrid, AnchorLabel, BoxCoder, CropConfig, FpnLevel,
    MatchResult, ASPECT_RATIOS,
};
use crate::nn::{FeatureMap, PoolPlan, Real};
use crate::raster::{round_up, RgbImage};

pub const PYRAMID_SIDES: [usize; 6] = [32, 64, 128, 256, 512, 800];

/// Every pyramid canvas is padded to a multiple of the coarsest stride.
pub const CANVAS_MULTIPLE: usize = 64;

const RPN_LEVELS: [FpnLevel; 6] = [
    FpnLevel::P2,
    FpnLevel::P3,
    FpnLevel::P4,
    FpnLevel::P5,
    FpnLevel::P6,
    FpnLevel::P6,
];

const ROI_LEVELS: [FpnLevel; 6] = [
    FpnLevel::P2,
    FpnLevel::P2,
    FpnLevel::P2,
    FpnLevel::P3,
    FpnLevel::P4,
    FpnLevel::P5,
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidScaleSet {
    sides: Vec<usize>,
}

impl Default for PyramidScaleSet {
    fn default() -> Self {
        Self {
            sides: PYRAMID_SIDES.to_vec(),
        }
    }
}

impl PyramidScaleSet {
    pub fn new(sides: Vec<usize>) -> Result<Self> {
        if sides.len() != 6 || sides[0] == 0 || sides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!(
                "pyramid needs 6 strictly increasing sides, got {sides:?}"
            )));
        }
        Ok(Self { sides })
    }

    pub fn sides(&self) -> &[usize] {
        &self.sides
    }
}

/// `(rpn_level, roi_level)` for pyramid scale `index`.
pub fn assign_levels(index: usize) -> (FpnLevel, FpnLevel) {
    (RPN_LEVELS[index], ROI_LEVELS[index])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelAssignment {
    pub rpn_level: FpnLevel,
    pub roi_level: FpnLevel,
}

pub fn level_table() -> [LevelAssignment; 6] {
    std::array::from_fn(|i| {
        let (rpn_level, roi_level) = assign_levels(i);
        LevelAssignment { rpn_level, roi_level }
    })
}

/// One resized crop placed at the top-left of a zero canvas.
#[derive(Clone, Debug)]
pub struct PyramidCrop {
    pub scale_index: usize,
    pub side: usize,
    pub canvas: usize,
    pub pixels: RgbImage,
    /// Object box in crop pixel coordinates.
    pub object_box: BBox,
}

impl PyramidCrop {
    /// Cells of the content (non-padding) region on `level`.
    pub fn content_cells(&self, level: FpnLevel) -> usize {
        self.side.div_ceil(level.stride())
    }

    /// Cells of the whole canvas on `level`.
    pub fn canvas_cells(&self, level: FpnLevel) -> usize {
        self.canvas.div_ceil(level.stride())
    }
}

#[derive(Clone, Debug)]
pub struct ObjectPyramid {
    pub annotation: Annotation,
    /// Square window in source-image coordinates.
    pub window: BBox,
    pub crops: Vec<PyramidCrop>,
}

impl ObjectPyramid {
    pub fn class_id(&self) -> usize {
        self.annotation.class_id
    }
}

/// Crops the square window around `ann` out of `pixels` (zero beyond the
/// image) and resamples it to every pyramid side.
pub fn build_object_pyramid<R: Rng + ?Sized>(
    pixels: &RgbImage,
    ann: &Annotation,
    scales: &PyramidScaleSet,
    crop: &CropConfig,
    rng: &mut R,
) -> Result<ObjectPyramid> {
    let b = &ann.bbox;
    if b.width() < 2.0 || b.height() < 2.0 {
        return Err(Error::DegenerateBox(format!(
            "{:?} in image {} is smaller than 2 px",
            b.to_array(),
            ann.image_id
        )));
    }
    let window = crop_window(b, crop, rng);
    let crops = scales
        .sides()
        .iter()
        .enumerate()
        .map(|(scale_index, &side)| {
            let f = side as f64 / window.width();
            PyramidCrop {
                scale_index,
                side,
                canvas: round_up(side, CANVAS_MULTIPLE),
                pixels: pixels.resample_window(&window, side),
                object_box: b.translated(-window.x1, -window.y1).scaled(f, f),
            }
        })
        .collect();
    Ok(ObjectPyramid {
        annotation: ann.clone(),
        window,
        crops,
    })
}

fn centric(n: usize) -> Vec<usize> {
    match n {
        0 => vec![],
        1 => vec![0],
        _ if n % 2 == 0 => vec![n / 2 - 1, n / 2],
        _ => vec![(n - 1) / 2 - 1, (n - 1) / 2],
    }
}

/// Centric 2×2 cells of an `height × width` map, each with the three
/// anchor ratios, as `(y, x, ratio_index)`.
pub fn select_rpn_positives(height: usize, width: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for y in centric(height) {
        for x in centric(width) {
            for r in 0..ASPECT_RATIOS.len() {
                out.push((y, x, r));
            }
        }
    }
    out
}

/// Adaptive average pooling of the top-left `content_h × content_w` region
/// of `map` to `out × out`.
pub fn select_roi_refinement<T: Real>(
    map: &FeatureMap<T>,
    content_h: usize,
    content_w: usize,
    out: usize,
) -> (Vec<T>, PoolPlan) {
    let plan = PoolPlan::adaptive_avg(map.height, map.width, content_h, content_w, out);
    (plan.apply(map), plan)
}

/// An RPN sample drawn from a pyramid crop, addressed on its level map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpnRefineSample {
    pub level: FpnLevel,
    pub y: usize,
    pub x: usize,
    pub ratio: usize,
    pub positive: bool,
}

/// Everything one pyramid crop contributes to the refinement losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementTargets {
    pub scale_index: usize,
    pub rpn_level: FpnLevel,
    pub cells: Vec<(usize, usize)>,
    pub rpn_samples: Vec<RpnRefineSample>,
    pub roi_level: FpnLevel,
    /// Content region on the RoI level, `(height, width)` in cells.
    pub roi_content: (usize, usize),
    pub class_id: usize,
}

impl RefinementTargets {
    pub fn positives(&self) -> usize {
        self.rpn_samples.iter().filter(|s| s.positive).count()
    }

    pub fn negatives(&self) -> usize {
        self.rpn_samples.len() - self.positives()
    }
}

/// Manual selection for one crop.
pub fn manual_targets(crop: &PyramidCrop, class_id: usize) -> RefinementTargets {
    let (rpn_level, roi_level) = assign_levels(crop.scale_index);
    let n = crop.content_cells(rpn_level);
    let rpn_samples: Vec<RpnRefineSample> = select_rpn_positives(n, n)
        .into_iter()
        .map(|(y, x, ratio)| RpnRefineSample {
            level: rpn_level,
            y,
            x,
            ratio,
            positive: true,
        })
        .collect();
    let mut cells: Vec<(usize, usize)> = rpn_samples.iter().map(|s| (s.y, s.x)).collect();
    cells.dedup();
    let m = crop.content_cells(roi_level);
    RefinementTargets {
        scale_index: crop.scale_index,
        rpn_level,
        cells,
        rpn_samples,
        roi_level,
        roi_content: (m, m),
        class_id,
    }
}

/// Anchor grid over a crop's whole canvas on all five levels.
pub fn crop_grid(crop: &PyramidCrop) -> AnchorGrid {
    generate_anchors(crop.canvas, crop.canvas, &FpnLevel::ALL)
}

/// Standard IoU matching on every crop with the crop's object box as the
/// only ground truth.
pub fn anchor_match_on_pyramids(
    pyramid: &ObjectPyramid,
    pos_thr: f64,
    neg_thr: f64,
    coder: &BoxCoder,
) -> Vec<(AnchorGrid, MatchResult)> {
    pyramid
        .crops
        .iter()
        .map(|crop| {
            let grid = crop_grid(crop);
            let m = match_anchors(&grid, &[crop.object_box], pos_thr, neg_thr, coder);
            (grid, m)
        })
        .collect()
}

/// Matching-based targets for one crop: up to `batch` anchors sampled from
/// the match with at most half positives. The RoI side is unchanged.
pub fn anchor_match_targets<R: Rng + ?Sized>(
    crop: &PyramidCrop,
    class_id: usize,
    pos_thr: f64,
    neg_thr: f64,
    batch: usize,
    rng: &mut R,
) -> RefinementTargets {
    let grid = crop_grid(crop);
    let m = match_anchors(&grid, &[crop.object_box], pos_thr, neg_thr, &BoxCoder::default());
    let pos = m.indices(AnchorLabel::Positive);
    let neg = m.indices(AnchorLabel::Negative);
    let n_pos = pos.len().min(batch / 2);
    let n_neg = neg.len().min(batch - n_pos);
    let mut chosen: Vec<(usize, bool)> = sample(rng, pos.len(), n_pos)
        .iter()
        .map(|i| (pos[i], true))
        .chain(sample(rng, neg.len(), n_neg).iter().map(|i| (neg[i], false)))
        .collect();
    chosen.sort_unstable();
    let rpn_samples = chosen
        .into_iter()
        .map(|(idx, positive)| {
            let lvl = grid.level_of(idx);
            let local = idx - lvl.start;
            let per = lvl.per_cell();
            let cell = local / per;
            RpnRefineSample {
                level: lvl.level,
                y: cell / lvl.width,
                x: cell % lvl.width,
                ratio: local % per,
                positive,
            }
        })
        .collect();
    let manual = manual_targets(crop, class_id);
    RefinementTargets {
        rpn_samples,
        cells: Vec::new(),
        ..manual
    }
}
