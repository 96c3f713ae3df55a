//! Two-step training: base training on abundant classes, then k-shot
//! fine-tuning with a fresh classifier, with the refinement branch
//! switchable per stage.
//!
//! A step is split into [`Trainer::plan_step`], which makes every random
//! choice (images, scales, sampled anchors and RoIs, object pyramids), and
//! [`loss_and_grad`], a deterministic function of weights and plan. The
//! gradient check reuses the second half in `f64`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::datamodel::{BBox, ClassSplit, Dataset, ImageRecord};
use crate::detector::{
    prepare_image, Architecture, Detector, DetectorConfig, FeatureGrads, FeatureTape, FpnFeatures, PoolRequest,
    RpnLevelOut, RpnTape,
};
use crate::error::{Error, Result};
use crate::geometry::{iou, match_anchors, AnchorLabel, CropConfig, FpnLevel};
use crate::losses::{
    roi_loss_baseline, roi_loss_mpsr, rpn_loss_baseline, rpn_loss_mpsr, BinarySample, ClassSample, LossBreakdown,
    RegSample,
};
use crate::mpsr::{anchor_match_targets, build_object_pyramid, manual_targets, ObjectPyramid, PyramidScaleSet, RefinementTargets};
use crate::nn::{FeatureMap, ParamSet, PoolPlan, Real};
use crate::raster::{ResizePolicy, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Single-scale Faster R-CNN without a feature pyramid.
    Baseline,
    BaselineFpn,
    Mpsr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineStage {
    BaseOnly,
    FewshotOnly,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PyramidSelection {
    Manual,
    AnchorMatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Multiscale {
    None,
    /// One random shorter side per image and step.
    ScaleAug,
    /// Every shorter side per image and step.
    ImagePyramids,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Fewshot,
}

/// Shorter sides used by the multi-scale baselines at full resolution.
pub const PAPER_MULTISCALE_SIDES: [f64; 5] = [480.0, 576.0, 688.0, 864.0, 1200.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub refine_rpn: bool,
    pub refine_roi: bool,
    pub refine_stage: RefineStage,
    pub pyramid_selection: PyramidSelection,
    pub multiscale: Multiscale,
    pub multiscale_sides: Vec<f64>,
    pub lambda: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(iterations, lr)` segments.
    pub base_schedule: Vec<(usize, f64)>,
    pub finetune_schedule: Vec<(usize, f64)>,
    /// Linear ramp from `warmup_factor · lr` to `lr` over the first
    /// iterations of each stage.
    pub warmup_iters: usize,
    pub warmup_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub roi_batch: usize,
    pub roi_foreground_fraction: f64,
    pub roi_foreground_iou: f64,
    /// Anchors sampled per crop when matching anchors on pyramids.
    pub pyramid_anchor_batch: usize,
    pub crop: CropConfig,
    pub pyramid_sides: Vec<usize>,
}

impl TrainConfig {
    /// Desk-scale defaults: short schedules, small batches.
    pub fn desk(mode: Mode) -> Self {
        Self {
            mode,
            refine_rpn: mode == Mode::Mpsr,
            refine_roi: mode == Mode::Mpsr,
            refine_stage: RefineStage::Both,
            pyramid_selection: PyramidSelection::Manual,
            multiscale: Multiscale::None,
            multiscale_sides: PAPER_MULTISCALE_SIDES.iter().map(|s| s * 128.0 / 800.0).collect(),
            lambda: crate::losses::DEFAULT_LAMBDA,
            momentum: 0.9,
            weight_decay: 1e-4,
            base_schedule: vec![(2000, 0.01), (500, 0.001)],
            finetune_schedule: vec![(300, 0.01), (100, 0.001)],
            warmup_iters: 100,
            warmup_factor: 0.001,
            batch_size: 4,
            seed: 0,
            rpn_batch: 64,
            rpn_positive_fraction: 0.5,
            roi_batch: 32,
            roi_foreground_fraction: 0.25,
            roi_foreground_iou: 0.5,
            pyramid_anchor_batch: 24,
            crop: CropConfig::default(),
            pyramid_sides: crate::mpsr::PYRAMID_SIDES.to_vec(),
        }
    }

    /// Full-size schedule and multi-scale sides, kept for reference.
    pub fn paper(mode: Mode) -> Self {
        Self {
            multiscale_sides: PAPER_MULTISCALE_SIDES.to_vec(),
            base_schedule: vec![(12_000, 0.02), (3_000, 0.002)],
            finetune_schedule: vec![(1_300, 0.01), (400, 0.001)],
            warmup_iters: 1_000,
            rpn_batch: 256,
            roi_batch: 512,
            ..Self::desk(mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::Mpsr && !(self.refine_rpn || self.refine_roi) {
            return Err(Error::InvalidInput(
                "mpsr mode needs refine_rpn or refine_roi".into(),
            ));
        }
        if self.batch_size == 0 || self.rpn_batch == 0 || self.roi_batch == 0 {
            return Err(Error::InvalidInput("batch sizes must be positive".into()));
        }
        if self.multiscale != Multiscale::None && self.multiscale_sides.is_empty() {
            return Err(Error::InvalidInput("multiscale needs at least one side".into()));
        }
        if self.base_schedule.iter().chain(&self.finetune_schedule).any(|&(_, lr)| !(lr >= 0.0)) {
            return Err(Error::InvalidInput("learning rates must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_factor) {
            return Err(Error::InvalidInput("warmup_factor must be in [0, 1]".into()));
        }
        PyramidScaleSet::new(self.pyramid_sides.clone())?;
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        match self.mode {
            Mode::Baseline => Architecture::SingleScale,
            Mode::BaselineFpn | Mode::Mpsr => Architecture::Fpn,
        }
    }

    /// Whether the refinement branch runs in `stage`.
    pub fn refinement_active(&self, stage: Stage) -> bool {
        self.mode == Mode::Mpsr
            && match (self.refine_stage, stage) {
                (RefineStage::Both, _) => true,
                (RefineStage::BaseOnly, Stage::Base) => true,
                (RefineStage::FewshotOnly, Stage::Fewshot) => true,
                _ => false,
            }
    }

    pub fn schedule(&self, stage: Stage) -> &[(usize, f64)] {
        match stage {
            Stage::Base => &self.base_schedule,
            Stage::Fewshot => &self.finetune_schedule,
        }
    }

    /// Learning rate of `stage` at 0-based iteration `it`, warmup included.
    pub fn lr(&self, stage: Stage, it: usize) -> f64 {
        let lr = lr_at(self.schedule(stage), it);
        if it < self.warmup_iters {
            let a = it as f64 / self.warmup_iters as f64;
            lr * (self.warmup_factor * (1.0 - a) + a)
        } else {
            lr
        }
    }
}

pub fn schedule_len(schedule: &[(usize, f64)]) -> usize {
    schedule.iter().map(|s| s.0).sum()
}

/// Learning rate at 0-based iteration `it`; the last segment's rate is
/// held past the end.
pub fn lr_at(schedule: &[(usize, f64)], it: usize) -> f64 {
    let mut acc = 0;
    for &(n, lr) in schedule {
        acc += n;
        if it < acc {
            return lr;
        }
    }
    schedule.last().map(|s| s.1).unwrap_or(0.0)
}

/// Independent random streams, one per role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RngRole {
    /// Epoch shuffles, anchor and RoI sampling.
    Sampler = 0,
    /// Object choice and crop shifts for pyramids.
    Pyramid = 1,
    /// Scale choice for scale augmentation.
    Augment = 2,
    /// Weight initialization.
    Init = 3,
}

pub fn role_rng(seed: u64, role: RngRole) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role as u64);
    rng
}

/// Uniformly picks one annotation of `image` and builds its pyramid;
/// `None` when the image has no annotations.
pub fn sample_pyramid_for_image<R: Rng + ?Sized>(
    image: &ImageRecord,
    pixels: &RgbImage,
    scales: &PyramidScaleSet,
    crop: &CropConfig,
    rng: &mut R,
) -> Result<Option<ObjectPyramid>> {
    if image.annotations.is_empty() {
        return Ok(None);
    }
    let i = rng.random_range(0..image.annotations.len());
    build_object_pyramid(pixels, &image.annotations[i], scales, crop, rng).map(Some)
}

/// Main-branch supervision for one resized image.
#[derive(Clone, Debug)]
pub struct ViewPlan {
    pub input: FeatureMap<f32>,
    /// Sampled anchors `(grid index, is positive)`.
    pub rpn_samples: Vec<(usize, bool)>,
    /// Regression targets of the positive samples, by grid index.
    pub rpn_targets: Vec<(usize, [f64; 4])>,
    pub rois: Vec<BBox>,
    /// 0 = background, `c + 1` = class `c`.
    pub roi_labels: Vec<usize>,
    pub roi_targets: Vec<Option<[f64; 4]>>,
}

#[derive(Clone, Debug)]
pub struct CropPlan {
    pub input: FeatureMap<f32>,
    pub targets: RefinementTargets,
}

/// Every random decision of one step.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub views: Vec<ViewPlan>,
    pub crops: Vec<CropPlan>,
    pub refine_rpn: bool,
    pub refine_roi: bool,
    pub lambda: f64,
}

impl StepPlan {
    pub fn refinement_rpn_samples(&self) -> usize {
        if self.refine_rpn {
            self.crops.iter().map(|c| c.targets.rpn_samples.len()).sum()
        } else {
            0
        }
    }

    pub fn refinement_roi_samples(&self) -> usize {
        if self.refine_roi {
            self.crops.len()
        } else {
            0
        }
    }
}

/// Per-input forward state kept for the backward pass.
struct Unit<T> {
    feats: FpnFeatures<T>,
    tape: FeatureTape<T>,
    rpn: [Option<(RpnLevelOut<T>, RpnTape<T>)>; 5],
    requests: Vec<PoolRequest>,
}

enum RowRole {
    Main { label: usize, target: Option<[f64; 4]> },
    Refine { label: usize },
}

fn cast_input<T: Real>(x: &FeatureMap<f32>) -> FeatureMap<T> {
    x.cast()
}

/// Loss terms and parameter gradients for a fixed plan.
pub fn loss_and_grad<T: Real>(det: &Detector<T>, plan: &StepPlan) -> Result<(LossBreakdown, ParamSet<T>)> {
    let cfg = &det.config;
    let a = cfg.anchors_per_cell();
    let mut units: Vec<Unit<T>> = Vec::new();
    let mut rows: Vec<T> = Vec::new();
    let mut roles: Vec<(usize, RowRole)> = Vec::new();

    // (unit, level, local index)
    let mut main_bin = Vec::new();
    let mut main_bin_src = Vec::new();
    let mut main_reg = Vec::new();
    let mut main_reg_src = Vec::new();
    let mut ref_bin = Vec::new();
    let mut ref_bin_src = Vec::new();

    for view in &plan.views {
        let input = cast_input::<T>(&view.input);
        let (feats, tape) = det.features_train(&input, cfg.levels())?;
        let grid = cfg.anchor_grid(input.height, input.width);
        let mut rpn: [Option<(RpnLevelOut<T>, RpnTape<T>)>; 5] = Default::default();
        for lvl in &grid.levels {
            rpn[lvl.level.index()] = Some(det.rpn_level_train(lvl.level, feats.level(lvl.level)));
        }
        let u = units.len();
        let logit_of = |idx: usize| {
            let lvl = grid.level_of(idx);
            let local = idx - lvl.start;
            let out = &rpn[lvl.level.index()].as_ref().expect("level computed").0;
            (lvl.level, local, out)
        };
        for &(idx, positive) in &view.rpn_samples {
            let (level, local, out) = logit_of(idx);
            main_bin.push(BinarySample {
                logit: out.logits[local].f64(),
                positive,
            });
            main_bin_src.push((u, level, local));
        }
        for &(idx, target) in &view.rpn_targets {
            let (level, local, out) = logit_of(idx);
            let d = &out.deltas[local * 4..local * 4 + 4];
            main_reg.push(RegSample {
                pred: [d[0].f64(), d[1].f64(), d[2].f64(), d[3].f64()],
                target,
            });
            main_reg_src.push((u, level, local));
        }
        let requests: Vec<PoolRequest> = view.rois.iter().map(|b| det.roi_request(&feats, b)).collect();
        rows.extend(det.pool_rows(&feats, &requests));
        for (i, &label) in view.roi_labels.iter().enumerate() {
            roles.push((
                u,
                RowRole::Main {
                    label,
                    target: view.roi_targets[i],
                },
            ));
        }
        units.push(Unit {
            feats,
            tape,
            rpn,
            requests,
        });
    }

    for crop in &plan.crops {
        let t = &crop.targets;
        let mut levels: BTreeSet<FpnLevel> = BTreeSet::new();
        if plan.refine_rpn {
            levels.extend(t.rpn_samples.iter().map(|s| s.level));
        }
        if plan.refine_roi {
            levels.insert(t.roi_level);
        }
        if levels.is_empty() {
            continue;
        }
        let levels: Vec<FpnLevel> = levels.into_iter().collect();
        let input = cast_input::<T>(&crop.input);
        let (feats, tape) = det.features_train(&input, &levels)?;
        let u = units.len();
        let mut rpn: [Option<(RpnLevelOut<T>, RpnTape<T>)>; 5] = Default::default();
        if plan.refine_rpn {
            for s in &t.rpn_samples {
                let slot = &mut rpn[s.level.index()];
                if slot.is_none() {
                    *slot = Some(det.rpn_level_train(s.level, feats.level(s.level)));
                }
                let out = &slot.as_ref().expect("just computed").0;
                let local = (s.y * out.width + s.x) * a + s.ratio;
                ref_bin.push(BinarySample {
                    logit: out.logits[local].f64(),
                    positive: s.positive,
                });
                ref_bin_src.push((u, s.level, local));
            }
        }
        let mut requests = Vec::new();
        if plan.refine_roi {
            let map = feats.level(t.roi_level);
            let (ch, cw) = t.roi_content;
            requests.push(PoolRequest {
                level: t.roi_level,
                plan: PoolPlan::adaptive_avg(map.height, map.width, ch, cw, cfg.roi_size),
            });
            rows.extend(det.pool_rows(&feats, &requests));
            roles.push((u, RowRole::Refine { label: t.class_id + 1 }));
        }
        units.push(Unit {
            feats,
            tape,
            rpn,
            requests,
        });
    }

    let n_rows = roles.len();
    let (head, head_tape) = det.head_train(rows, n_rows);
    let k1 = cfg.num_classes + 1;
    let mut main_cls = Vec::new();
    let mut roi_reg = Vec::new();
    let mut roi_reg_rows = Vec::new();
    let mut main_rows = Vec::new();
    let mut ref_cls = Vec::new();
    let mut ref_rows = Vec::new();
    for (r, (_, role)) in roles.iter().enumerate() {
        let logits: Vec<f64> = head.cls[r * k1..(r + 1) * k1].iter().map(|v| v.f64()).collect();
        match role {
            RowRole::Main { label, target } => {
                if let Some(target) = target {
                    let d = &head.deltas[r * 4..r * 4 + 4];
                    roi_reg.push(RegSample {
                        pred: [d[0].f64(), d[1].f64(), d[2].f64(), d[3].f64()],
                        target: *target,
                    });
                    roi_reg_rows.push(r);
                }
                main_cls.push(ClassSample { logits, label: *label });
                main_rows.push(r);
            }
            RowRole::Refine { label } => {
                ref_cls.push(ClassSample { logits, label: *label });
                ref_rows.push(r);
            }
        }
    }

    let rpn_loss = if plan.refine_rpn {
        rpn_loss_mpsr(&main_bin, &main_reg, &ref_bin)?
    } else {
        rpn_loss_baseline(&main_bin, &main_reg)?
    };
    let roi_loss = if plan.refine_roi && !ref_cls.is_empty() {
        roi_loss_mpsr(&main_cls, &roi_reg, &ref_cls, plan.lambda)?
    } else {
        roi_loss_baseline(&main_cls, &roi_reg)?
    };
    let breakdown = LossBreakdown::new(&rpn_loss, &roi_loss);

    let mut grads = det.params.zeros_like();
    let mut dcls = vec![T::zero(); n_rows * k1];
    let mut ddel = vec![T::zero(); n_rows * 4];
    for (g, &r) in roi_loss.d_main.iter().zip(&main_rows) {
        for (j, v) in g.iter().enumerate() {
            dcls[r * k1 + j] = T::of(*v);
        }
    }
    for (g, &r) in roi_loss.d_refine.iter().zip(&ref_rows) {
        for (j, v) in g.iter().enumerate() {
            dcls[r * k1 + j] = T::of(*v);
        }
    }
    for (g, &r) in roi_loss.d_reg.iter().zip(&roi_reg_rows) {
        for k in 0..4 {
            ddel[r * 4 + k] = T::of(g[k]);
        }
    }
    let drows = det.head_backward(head_tape, &dcls, &ddel, &mut grads);

    // Sparse RPN gradients per unit and level.
    let lens: Vec<[usize; 5]> = units
        .iter()
        .map(|u| std::array::from_fn(|i| u.rpn[i].as_ref().map_or(0, |r| r.0.logits.len())))
        .collect();
    let mut dlogit: Vec<[Option<(Vec<T>, Vec<T>)>; 5]> = units.iter().map(|_| Default::default()).collect();
    let mut add = |u: usize, level: FpnLevel, local: usize, dl: Option<f64>, dr: Option<[f64; 4]>| {
        let n = lens[u][level.index()];
        let (l, d) = dlogit[u][level.index()].get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); 4 * n]));
        if let Some(v) = dl {
            l[local] += T::of(v);
        }
        if let Some(g) = dr {
            for k in 0..4 {
                d[local * 4 + k] += T::of(g[k]);
            }
        }
    };
    for (&(u, level, local), &g) in main_bin_src.iter().zip(&rpn_loss.d_main) {
        add(u, level, local, Some(g), None);
    }
    for (&(u, level, local), &g) in main_reg_src.iter().zip(&rpn_loss.d_reg) {
        add(u, level, local, None, Some(g));
    }
    for (&(u, level, local), &g) in ref_bin_src.iter().zip(&rpn_loss.d_refine) {
        add(u, level, local, Some(g), None);
    }

    let width = det.row_width();
    let mut row = 0;
    for (u, unit) in units.into_iter().enumerate() {
        let Unit {
            feats,
            tape,
            rpn,
            requests,
        } = unit;
        let mut dfeat = FeatureGrads::default();
        let nreq = requests.len();
        det.pool_backward(&feats, &requests, &drows[row * width..(row + nreq) * width], &mut dfeat);
        row += nreq;
        for (li, entry) in rpn.into_iter().enumerate() {
            let Some((_, rtape)) = entry else { continue };
            if let Some((dl, dd)) = dlogit[u][li].take() {
                let dmap = det.rpn_level_backward(rtape, &dl, &dd, &mut grads);
                dfeat.add(FpnLevel::ALL[li], &dmap);
            }
        }
        drop(feats);
        det.features_backward(tape, dfeat, &mut grads);
    }
    Ok((breakdown, grads))
}

fn sample_indices<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], n: usize) -> Vec<usize> {
    let mut out: Vec<usize> = sample(rng, pool.len(), n.min(pool.len())).iter().map(|i| pool[i]).collect();
    out.sort_unstable();
    out
}

/// One JSON line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub stage: Stage,
    pub detector: Detector<f32>,
    pub momentum: ParamSet<f32>,
    pub iteration: usize,
    dataset: Dataset,
    scales: PyramidScaleSet,
    sampler: ChaCha8Rng,
    pyramid: ChaCha8Rng,
    augment: ChaCha8Rng,
    epoch_order: Vec<usize>,
    cursor: usize,
    log: Option<BufWriter<File>>,
    pub history: Vec<LossBreakdown>,
    pub pyramids_built: usize,
}

impl Trainer {
    /// Starts a stage from the given weights with zero momentum.
    pub fn new(config: TrainConfig, stage: Stage, detector: Detector<f32>, mut dataset: Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.images.is_empty() {
            return Err(Error::Empty("training dataset has no images"));
        }
        if detector.config.architecture != config.architecture() {
            return Err(Error::InvalidInput(format!(
                "mode {:?} needs a {:?} detector",
                config.mode,
                config.architecture()
            )));
        }
        dataset.preload()?;
        let momentum = detector.params.zeros_like();
        let scales = PyramidScaleSet::new(config.pyramid_sides.clone())?;
        Ok(Self {
            sampler: role_rng(config.seed, RngRole::Sampler),
            pyramid: role_rng(config.seed, RngRole::Pyramid),
            augment: role_rng(config.seed, RngRole::Augment),
            config,
            stage,
            detector,
            momentum,
            iteration: 0,
            dataset,
            scales,
            epoch_order: Vec::new(),
            cursor: 0,
            log: None,
            history: Vec::new(),
            pyramids_built: 0,
        })
    }

    /// Restores a trainer mid-stage from a checkpoint written by
    /// [`Self::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, dataset: Dataset) -> Result<Self> {
        let state = ckpt
            .train_state
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no trainer state".into()))?;
        let mut t = Self::new(state.config.clone(), state.stage, ckpt.detector.clone(), dataset)?;
        if let Some(m) = &ckpt.momentum {
            if !m.same_layout(&t.momentum) {
                return Err(Error::Checkpoint("momentum layout mismatch".into()));
            }
            t.momentum = m.clone();
        }
        t.iteration = ckpt.iteration;
        t.sampler = state.sampler.restore();
        t.pyramid = state.pyramid.restore();
        t.augment = state.augment.restore();
        t.epoch_order = state.epoch_order.clone();
        t.cursor = state.cursor;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            detector: self.detector.clone(),
            momentum: Some(self.momentum.clone()),
            iteration: self.iteration,
            class_names: self.dataset.classes.clone(),
            train_state: Some(crate::checkpoint::TrainState {
                config: self.config.clone(),
                stage: self.stage,
                sampler: RngState::capture(&self.sampler),
                pyramid: RngState::capture(&self.pyramid),
                augment: RngState::capture(&self.augment),
                epoch_order: self.epoch_order.clone(),
                cursor: self.cursor,
            }),
        }
    }

    /// Appends JSON lines to `path`, starting with a configuration header.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = serde_json::json!({
            "stage": self.stage,
            "config": self.config,
            "refinement_active": self.config.refinement_active(self.stage),
            "detector": self.detector.config,
        });
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
        self.log = Some(w);
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        schedule_len(self.config.schedule(self.stage))
    }

    pub fn refinement_active(&self) -> bool {
        self.config.refinement_active(self.stage)
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            if self.cursor >= self.epoch_order.len() {
                self.epoch_order = (0..self.dataset.images.len()).collect();
                self.epoch_order.shuffle(&mut self.sampler);
                self.cursor = 0;
            }
            out.push(self.epoch_order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    fn view_policies(&mut self) -> Vec<ResizePolicy> {
        let base = self.detector.config.resize;
        let ratio = base.max_longer / base.shorter;
        let sides = &self.config.multiscale_sides;
        match self.config.multiscale {
            Multiscale::None => vec![base],
            Multiscale::ScaleAug => {
                let s = sides[self.augment.random_range(0..sides.len())];
                vec![ResizePolicy::new(s, s * ratio)]
            }
            Multiscale::ImagePyramids => sides.iter().map(|&s| ResizePolicy::new(s, s * ratio)).collect(),
        }
    }

    fn plan_view(&mut self, record: &ImageRecord, pixels: &RgbImage, policy: &ResizePolicy) -> Result<ViewPlan> {
        let det = &self.detector;
        let dcfg = &det.config;
        let cfg = &self.config;
        let prepared = prepare_image::<f32>(pixels, policy, dcfg);
        let f = prepared.scale;
        let gts: Vec<BBox> = record.annotations.iter().map(|a| a.bbox.scaled(f, f)).collect();
        let grid = dcfg.anchor_grid(prepared.input.height, prepared.input.width);
        let coder = dcfg.coder();
        let m = match_anchors(&grid, &gts, dcfg.rpn_pos_iou, dcfg.rpn_neg_iou, &coder);
        let pos = m.indices(AnchorLabel::Positive);
        let neg = m.indices(AnchorLabel::Negative);
        let max_pos = (cfg.rpn_batch as f64 * cfg.rpn_positive_fraction) as usize;
        let pos = sample_indices(&mut self.sampler, &pos, max_pos);
        let neg = sample_indices(&mut self.sampler, &neg, cfg.rpn_batch - pos.len());
        let mut rpn_samples: Vec<(usize, bool)> =
            pos.iter().map(|&i| (i, true)).chain(neg.iter().map(|&i| (i, false))).collect();
        rpn_samples.sort_unstable();
        let rpn_targets = pos.iter().map(|&i| (i, m.targets[i].expect("positive target"))).collect();

        let feats = det.forward_backbone(&prepared.input)?;
        let rpn = det.rpn_forward(&feats);
        let mut candidates: Vec<BBox> = det
            .propose(&grid, &rpn, prepared.height, prepared.width)
            .into_iter()
            .map(|(b, _)| b)
            .collect();
        candidates.extend(gts.iter().copied());
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        let mut best = Vec::with_capacity(candidates.len());
        for (i, c) in candidates.iter().enumerate() {
            let (g, v) = gts
                .iter()
                .enumerate()
                .map(|(g, b)| (g, iou(c, b)))
                .fold((usize::MAX, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            best.push(g);
            if v >= cfg.roi_foreground_iou {
                fg.push(i);
            } else {
                bg.push(i);
            }
        }
        let max_fg = (cfg.roi_batch as f64 * cfg.roi_foreground_fraction).round() as usize;
        let fg = sample_indices(&mut self.sampler, &fg, max_fg);
        let bg = sample_indices(&mut self.sampler, &bg, cfg.roi_batch - fg.len());
        let mut rois = Vec::new();
        let mut roi_labels = Vec::new();
        let mut roi_targets = Vec::new();
        for &i in &fg {
            let g = best[i];
            rois.push(candidates[i]);
            roi_labels.push(record.annotations[g].class_id + 1);
            roi_targets.push(Some(coder.encode(&gts[g], &candidates[i])));
        }
        for &i in &bg {
            rois.push(candidates[i]);
            roi_labels.push(0);
            roi_targets.push(None);
        }
        Ok(ViewPlan {
            input: prepared.input,
            rpn_samples,
            rpn_targets,
            rois,
            roi_labels,
            roi_targets,
        })
    }

    /// Draws the next batch and every random choice for it.
    pub fn plan_step(&mut self) -> Result<StepPlan> {
        let refine = self.refinement_active();
        let batch = self.next_batch();
        let mut views = Vec::new();
        let mut crops = Vec::new();
        for idx in batch {
            let record = self.dataset.images[idx].clone();
            let pixels = self.dataset.load_pixels(&record)?;
            for policy in self.view_policies() {
                views.push(self.plan_view(&record, &pixels, &policy)?);
            }
            if refine {
                let Some(pyr) =
                    sample_pyramid_for_image(&record, &pixels, &self.scales, &self.config.crop, &mut self.pyramid)?
                else {
                    continue;
                };
                self.pyramids_built += 1;
                let dcfg = &self.detector.config;
                for crop in &pyr.crops {
                    let targets = match self.config.pyramid_selection {
                        PyramidSelection::Manual => manual_targets(crop, pyr.class_id()),
                        PyramidSelection::AnchorMatch => anchor_match_targets(
                            crop,
                            pyr.class_id(),
                            dcfg.rpn_pos_iou,
                            dcfg.rpn_neg_iou,
                            self.config.pyramid_anchor_batch,
                            &mut self.pyramid,
                        ),
                    };
                    let input = crop
                        .pixels
                        .to_canvas(dcfg.pixel_mean, dcfg.pixel_std, crop.canvas, crop.canvas);
                    crops.push(CropPlan { input, targets });
                }
            }
        }
        Ok(StepPlan {
            views,
            crops,
            refine_rpn: refine && self.config.refine_rpn,
            refine_roi: refine && self.config.refine_roi,
            lambda: self.config.lambda,
        })
    }

    fn sgd(&mut self, grads: &ParamSet<f32>, lr: f64) {
        let lr = lr as f32;
        let mom = self.config.momentum as f32;
        let wd = self.config.weight_decay as f32;
        let ids: Vec<_> = self.detector.params.ids().collect();
        for id in ids {
            let g = &grads.get(id).data;
            let v = &mut self.momentum.get_mut(id).data;
            let w = &mut self.detector.params.get_mut(id).data;
            for i in 0..w.len() {
                v[i] = mom * v[i] + g[i] + wd * w[i];
                w[i] -= lr * v[i];
            }
        }
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let lr = self.config.lr(self.stage, self.iteration);
        let plan = self.plan_step()?;
        let (loss, grads) = loss_and_grad(&self.detector, &plan)?;
        if !loss.total.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite loss at iteration {}",
                self.iteration
            )));
        }
        self.sgd(&grads, lr);
        if let Some(w) = &mut self.log {
            let rec = LogRecord {
                stage: self.stage,
                iteration: self.iteration,
                lr,
                loss: loss.clone(),
            };
            let line = serde_json::to_string(&rec).expect("serializable");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io("training log", e))?;
        }
        self.iteration += 1;
        self.history.push(loss.clone());
        Ok(loss)
    }

    /// Runs until the stage schedule is exhausted.
    pub fn run(&mut self) -> Result<()> {
        while self.iteration < self.total_iterations() {
            self.step()?;
        }
        Ok(())
    }
}

/// Base training on the base-class annotations of `dataset`. The
/// classifier is sized for every class of the dataset; novel outputs
/// simply never see a positive.
pub fn train_base(
    dataset: &Dataset,
    split: &ClassSplit,
    det_config: DetectorConfig,
    config: &TrainConfig,
    log: Option<&Path>,
) -> Result<Checkpoint> {
    let base = dataset.restrict_to_classes(&split.base_classes);
    if base.images.is_empty() {
        return Err(Error::Empty("no base-class annotations to train on"));
    }
    let mut det_config = det_config;
    det_config.architecture = config.architecture();
    det_config.num_classes = dataset.num_classes();
    let det = Detector::with_rng(det_config, &mut role_rng(config.seed, RngRole::Init))?;
    let mut t = Trainer::new(config.clone(), Stage::Base, det, base)?;
    if let Some(p) = log {
        t.log_to(p)?;
    }
    t.run()?;
    Ok(t.checkpoint())
}

/// Detector for fine-tuning: every weight from `ckpt` except a freshly
/// initialized classifier sized for `num_classes`.
pub fn finetune_detector(ckpt: &Checkpoint, num_classes: usize, seed: u64) -> Detector<f32> {
    let mut det = ckpt.detector.clone();
    det.reset_classifier(num_classes, &mut role_rng(seed, RngRole::Init));
    det
}

pub fn finetune_trainer(ckpt: &Checkpoint, fewshot: &Dataset, config: &TrainConfig) -> Result<Trainer> {
    let det = finetune_detector(ckpt, fewshot.num_classes(), config.seed);
    Trainer::new(config.clone(), Stage::Fewshot, det, fewshot.clone())
}

/// Fine-tunes all layers on the k-shot set.
pub fn finetune(ckpt: &Checkpoint, fewshot: &Dataset, config: &TrainConfig, log: Option<&Path>) -> Result<Checkpoint> {
    let mut t = finetune_trainer(ckpt, fewshot, config)?;
    if let Some(p) = log {
        t.log_to(p)?;
    }
    t.run()?;
    Ok(t.checkpoint())
}
