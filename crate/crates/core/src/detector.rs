//! Faster R-CNN with a small convolutional backbone, an FPN neck emitting
//! P2–P6, an RPN head shared across levels, and a RoI head with
//! class-agnostic box regression.
//!
//! Training code drives the `*_train`/`*_backward` pairs directly;
//! [`Detector::predict`] is the inference path and is built from the same
//! forward functions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::BBox;
use crate::error::{Error, Result};
use crate::geometry::{generate_anchors, nms, AnchorGrid, BoxCoder, FpnLevel, ASPECT_RATIOS};
use crate::nn::{
    relu_backward, relu_inplace, subsample2x, subsample2x_backward, upsample2x, upsample2x_backward, Conv2d,
    ConvCache, FeatureMap, Linear, ParamSet, PoolPlan, Real,
};
use crate::raster::{round_up, ResizePolicy, RgbImage};

/// Input canvases must be a multiple of the coarsest stride.
pub const INPUT_MULTIPLE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// P2–P6 pyramid, three anchors per cell on each level.
    Fpn,
    /// One stride-16 map from C4 carrying all anchor areas.
    SingleScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub architecture: Architecture,
    pub stem_channels: usize,
    /// Output channels of stages C2..C5.
    pub stage_channels: [usize; 4],
    /// Extra stride-1 3×3 convolutions per stage.
    pub stage_depth: usize,
    pub fpn_channels: usize,
    pub roi_size: usize,
    pub roi_sampling: usize,
    pub head_hidden: usize,
    /// Foreground classes; the classifier has one more output for
    /// background at index 0.
    pub num_classes: usize,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_pre_nms: usize,
    pub rpn_post_nms: usize,
    pub rpn_nms_iou: f64,
    pub min_proposal_side: f64,
    pub score_threshold: f64,
    pub test_nms_iou: f64,
    pub max_detections: usize,
    pub resize: ResizePolicy,
    pub pixel_mean: [f32; 3],
    pub pixel_std: [f32; 3],
    pub box_stds: [f64; 4],
    pub class_agnostic_regression: bool,
}

impl DetectorConfig {
    /// CPU-sized network for 128-pixel synthetic images.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            architecture: Architecture::Fpn,
            stem_channels: 16,
            stage_channels: [24, 32, 48, 64],
            stage_depth: 0,
            fpn_channels: 48,
            roi_size: 7,
            roi_sampling: 2,
            head_hidden: 128,
            num_classes,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_pre_nms: 256,
            rpn_post_nms: 64,
            rpn_nms_iou: 0.7,
            min_proposal_side: 1.0,
            score_threshold: 0.05,
            test_nms_iou: 0.5,
            max_detections: 100,
            resize: ResizePolicy::new(128.0, 213.0),
            pixel_mean: [0.5, 0.5, 0.5],
            pixel_std: [0.25, 0.25, 0.25],
            box_stds: BoxCoder::default().stds,
            class_agnostic_regression: true,
        }
    }

    /// Image and proposal settings of the full-size setup; the backbone
    /// stays small.
    pub fn paper(num_classes: usize) -> Self {
        Self {
            stage_depth: 1,
            fpn_channels: 64,
            head_hidden: 256,
            rpn_pre_nms: 1000,
            rpn_post_nms: 1000,
            resize: ResizePolicy::PAPER,
            ..Self::desk(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("stem_channels", self.stem_channels),
            ("fpn_channels", self.fpn_channels),
            ("roi_size", self.roi_size),
            ("roi_sampling", self.roi_sampling),
            ("head_hidden", self.head_hidden),
            ("num_classes", self.num_classes),
            ("rpn_pre_nms", self.rpn_pre_nms),
            ("rpn_post_nms", self.rpn_post_nms),
            ("max_detections", self.max_detections),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::InvalidInput("stage_channels must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rpn_neg_iou)
            || !(0.0..=1.0).contains(&self.rpn_pos_iou)
            || self.rpn_neg_iou > self.rpn_pos_iou
        {
            return Err(Error::InvalidInput(
                "anchor thresholds need 0 <= neg <= pos <= 1".into(),
            ));
        }
        if !self.class_agnostic_regression {
            return Err(Error::InvalidInput(
                "only class-agnostic regression is supported".into(),
            ));
        }
        Ok(())
    }

    pub fn coder(&self) -> BoxCoder {
        BoxCoder { stds: self.box_stds }
    }

    pub fn anchors_per_cell(&self) -> usize {
        match self.architecture {
            Architecture::Fpn => ASPECT_RATIOS.len(),
            Architecture::SingleScale => ASPECT_RATIOS.len() * FpnLevel::ALL.len(),
        }
    }

    /// Levels the architecture produces.
    pub fn levels(&self) -> &'static [FpnLevel] {
        match self.architecture {
            Architecture::Fpn => &FpnLevel::ALL,
            Architecture::SingleScale => &[FpnLevel::P4],
        }
    }

    pub fn anchor_grid(&self, canvas_h: usize, canvas_w: usize) -> AnchorGrid {
        match self.architecture {
            Architecture::Fpn => generate_anchors(canvas_h, canvas_w, &FpnLevel::ALL),
            Architecture::SingleScale => AnchorGrid::single_level(canvas_h, canvas_w),
        }
    }

    /// Level a proposal is pooled from.
    pub fn roi_level(&self, b: &BBox) -> FpnLevel {
        match self.architecture {
            Architecture::Fpn => roi_level_for_scale(crate::geometry::object_scale(b)),
            Architecture::SingleScale => FpnLevel::P4,
        }
    }
}

/// Area partition `(0,112²) [112²,224²) [224²,448²) [448²,∞)` onto P2..P5.
pub fn roi_level_for_scale(s: f64) -> FpnLevel {
    if s < 112.0 {
        FpnLevel::P2
    } else if s < 224.0 {
        FpnLevel::P3
    } else if s < 448.0 {
        FpnLevel::P4
    } else {
        FpnLevel::P5
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Feature maps indexed by level; levels not computed are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct FpnFeatures<T> {
    pub maps: [Option<FeatureMap<T>>; 5],
}

impl<T: Real> FpnFeatures<T> {
    pub fn get(&self, level: FpnLevel) -> Option<&FeatureMap<T>> {
        self.maps[level.index()].as_ref()
    }

    pub fn level(&self, level: FpnLevel) -> &FeatureMap<T> {
        self.get(level)
            .unwrap_or_else(|| panic!("{level} was not computed"))
    }

    pub fn levels(&self) -> Vec<FpnLevel> {
        FpnLevel::ALL
            .into_iter()
            .filter(|l| self.maps[l.index()].is_some())
            .collect()
    }
}

/// Gradients w.r.t. feature maps, accumulated lazily.
#[derive(Clone, Debug)]
pub struct FeatureGrads<T> {
    pub maps: [Option<FeatureMap<T>>; 5],
}

impl<T: Real> Default for FeatureGrads<T> {
    fn default() -> Self {
        Self {
            maps: Default::default(),
        }
    }
}

impl<T: Real> FeatureGrads<T> {
    pub fn entry(&mut self, level: FpnLevel, like: &FeatureMap<T>) -> &mut FeatureMap<T> {
        self.maps[level.index()].get_or_insert_with(|| FeatureMap::zeros(like.channels, like.height, like.width))
    }

    pub fn add(&mut self, level: FpnLevel, g: &FeatureMap<T>) {
        match &mut self.maps[level.index()] {
            Some(m) => m.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }
}

struct ConvStep<T> {
    cache: ConvCache<T>,
    out: FeatureMap<T>,
}

/// Saved activations of one feature forward pass.
pub struct FeatureTape<T> {
    stem: ConvStep<T>,
    stages: Vec<Vec<ConvStep<T>>>,
    laterals: [Option<ConvCache<T>>; 4],
    outputs: [Option<ConvCache<T>>; 4],
    merged_shapes: [Option<(usize, usize)>; 4],
    p5_shape: Option<(usize, usize)>,
}

pub struct RpnLevelOut<T> {
    pub level: FpnLevel,
    pub height: usize,
    pub width: usize,
    pub anchors_per_cell: usize,
    /// `(y·W + x)·A + a`.
    pub logits: Vec<T>,
    /// Four per anchor, same order as `logits`.
    pub deltas: Vec<T>,
}

pub struct RpnTape<T> {
    conv: ConvCache<T>,
    hidden: FeatureMap<T>,
    cls: ConvCache<T>,
    reg: ConvCache<T>,
}

/// RPN outputs concatenated in anchor-grid order.
pub struct RpnOutput<T> {
    pub logits: Vec<T>,
    pub deltas: Vec<T>,
}

pub struct HeadOut<T> {
    pub n: usize,
    /// `n × (K+1)`.
    pub cls: Vec<T>,
    /// `n × 4`.
    pub deltas: Vec<T>,
}

pub struct HeadTape<T> {
    x: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
    n: usize,
}

/// One pooled RoI row: which level and which sampling plan.
#[derive(Clone, Debug)]
pub struct PoolRequest {
    pub level: FpnLevel,
    pub plan: PoolPlan,
}

/// A resized, normalized, padded input.
#[derive(Clone, Debug)]
pub struct PreparedImage<T> {
    pub input: FeatureMap<T>,
    /// Resize factor from source to input pixels.
    pub scale: f64,
    pub height: usize,
    pub width: usize,
}

pub fn prepare_image<T: Real>(image: &RgbImage, policy: &ResizePolicy, cfg: &DetectorConfig) -> PreparedImage<T> {
    let (w, h) = policy.output_size(image.width, image.height);
    let resized = image.resize(w, h);
    let input = resized.to_canvas(
        cfg.pixel_mean,
        cfg.pixel_std,
        round_up(h, INPUT_MULTIPLE),
        round_up(w, INPUT_MULTIPLE),
    );
    PreparedImage {
        input,
        scale: w as f64 / image.width as f64,
        height: h,
        width: w,
    }
}

#[derive(Clone, Debug)]
struct Network {
    stem: Conv2d,
    stages: Vec<Vec<Conv2d>>,
    laterals: [Option<Conv2d>; 4],
    outputs: [Option<Conv2d>; 4],
    rpn_conv: Conv2d,
    rpn_cls: Conv2d,
    rpn_reg: Conv2d,
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    reg: Linear,
}

impl Network {
    fn build<T: Real>(cfg: &DetectorConfig, p: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Self {
        let stem = Conv2d::new(p, "backbone.stem", 3, cfg.stem_channels, 4, 4, 0, None, rng);
        let n_stages = match cfg.architecture {
            Architecture::Fpn => 4,
            Architecture::SingleScale => 3,
        };
        let mut stages = Vec::new();
        let mut cin = cfg.stem_channels;
        for (s, &cout) in cfg.stage_channels.iter().enumerate().take(n_stages) {
            let stride = if s == 0 { 1 } else { 2 };
            let mut convs = vec![Conv2d::new(p, &format!("backbone.c{}.0", s + 2), cin, cout, 3, stride, 1, None, rng)];
            for d in 0..cfg.stage_depth {
                convs.push(Conv2d::new(
                    p,
                    &format!("backbone.c{}.{}", s + 2, d + 1),
                    cout,
                    cout,
                    3,
                    1,
                    1,
                    None,
                    rng,
                ));
            }
            stages.push(convs);
            cin = cout;
        }
        let c = cfg.fpn_channels;
        let mut laterals: [Option<Conv2d>; 4] = Default::default();
        let mut outputs: [Option<Conv2d>; 4] = Default::default();
        let neck_levels: Vec<usize> = match cfg.architecture {
            Architecture::Fpn => vec![0, 1, 2, 3],
            Architecture::SingleScale => vec![2],
        };
        for i in neck_levels {
            let l = i + 2;
            laterals[i] = Some(Conv2d::new(p, &format!("fpn.lateral{l}"), cfg.stage_channels[i], c, 1, 1, 0, None, rng));
            outputs[i] = Some(Conv2d::new(p, &format!("fpn.output{l}"), c, c, 3, 1, 1, None, rng));
        }
        let a = cfg.anchors_per_cell();
        let rpn_conv = Conv2d::new(p, "rpn.conv", c, c, 3, 1, 1, Some(0.01), rng);
        let rpn_cls = Conv2d::new(p, "rpn.cls", c, a, 1, 1, 0, Some(0.01), rng);
        let rpn_reg = Conv2d::new(p, "rpn.reg", c, 4 * a, 1, 1, 0, Some(0.01), rng);
        let pooled = c * cfg.roi_size * cfg.roi_size;
        let fc1 = Linear::new(p, "roi.fc1", pooled, cfg.head_hidden, None, rng);
        let fc2 = Linear::new(p, "roi.fc2", cfg.head_hidden, cfg.head_hidden, None, rng);
        let cls = Linear::new(p, "roi.cls", cfg.head_hidden, cfg.num_classes + 1, Some(0.01), rng);
        let reg = Linear::new(p, "roi.reg", cfg.head_hidden, 4, Some(0.001), rng);
        Self {
            stem,
            stages,
            laterals,
            outputs,
            rpn_conv,
            rpn_cls,
            rpn_reg,
            fc1,
            fc2,
            cls,
            reg,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Detector<T: Real> {
    pub config: DetectorConfig,
    pub params: ParamSet<T>,
    net: Network,
}

impl<T: Real> Detector<T> {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        Self::with_rng(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(config: DetectorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let net = Network::build(&config, &mut params, rng);
        Ok(Self { config, params, net })
    }

    /// Wraps existing weights; the layout must match what `config` builds.
    pub fn from_params(config: DetectorConfig, params: ParamSet<T>) -> Result<Self> {
        let mut shell = Self::new(config, 0)?;
        if !shell.params.same_layout(&params) {
            return Err(Error::Checkpoint(
                "parameter layout does not match the detector configuration".into(),
            ));
        }
        shell.params = params;
        Ok(shell)
    }

    pub fn cast<U: Real>(&self) -> Detector<U> {
        Detector {
            config: self.config.clone(),
            params: self.params.cast(),
            net: self.net.clone(),
        }
    }

    /// Replaces the classification layer with a fresh one for
    /// `num_classes` foreground classes: N(0, 0.01²) weights, zero bias.
    pub fn reset_classifier(&mut self, num_classes: usize, rng: &mut ChaCha8Rng) {
        let out = num_classes + 1;
        let w = Linear::init_weight(self.config.head_hidden, out, 0.01, rng);
        self.params.replace(self.net.cls.weight, w);
        self.params
            .replace(self.net.cls.bias, crate::nn::Tensor::zeros(&[out]));
        self.net.cls.out_features = out;
        self.config.num_classes = num_classes;
    }

    /// Name prefix of the classification layer's parameters.
    pub const CLASSIFIER: &'static str = "roi.cls";

    fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        if x.channels != 3 || x.height == 0 || x.width == 0 || x.height % INPUT_MULTIPLE != 0 || x.width % INPUT_MULTIPLE != 0 {
            return Err(Error::Shape(format!(
                "input must be 3×H×W with H, W positive multiples of {INPUT_MULTIPLE}, got {}×{}×{}",
                x.channels, x.height, x.width
            )));
        }
        Ok(())
    }

    /// All levels of the architecture, no saved activations.
    pub fn forward_backbone(&self, x: &FeatureMap<T>) -> Result<FpnFeatures<T>> {
        Ok(self.features_train(x, self.config.levels())?.0)
    }

    /// Computes the requested levels (plus whatever they depend on) and
    /// records activations for [`Self::features_backward`].
    pub fn features_train(&self, x: &FeatureMap<T>, levels: &[FpnLevel]) -> Result<(FpnFeatures<T>, FeatureTape<T>)> {
        self.check_input(x)?;
        let p = &self.params;
        let conv_relu = |conv: &Conv2d, input: &FeatureMap<T>| {
            let (mut out, cache) = conv.forward(p, input);
            relu_inplace(&mut out.data);
            ConvStep { cache, out }
        };
        let stem = conv_relu(&self.net.stem, x);
        let mut stages: Vec<Vec<ConvStep<T>>> = Vec::new();
        for convs in &self.net.stages {
            let mut steps: Vec<ConvStep<T>> = Vec::new();
            for conv in convs {
                let input = steps.last().map(|s| &s.out).unwrap_or_else(|| match stages.last() {
                    Some(prev) => &prev.last().expect("non-empty stage").out,
                    None => &stem.out,
                });
                let step = conv_relu(conv, input);
                steps.push(step);
            }
            stages.push(steps);
        }
        let c_out = |i: usize| &stages[i].last().expect("non-empty stage").out;

        let mut maps: [Option<FeatureMap<T>>; 5] = Default::default();
        let mut laterals: [Option<ConvCache<T>>; 4] = Default::default();
        let mut outputs: [Option<ConvCache<T>>; 4] = Default::default();
        let mut merged_shapes: [Option<(usize, usize)>; 4] = Default::default();
        let mut p5_shape = None;
        match self.config.architecture {
            Architecture::SingleScale => {
                if levels.contains(&FpnLevel::P4) {
                    let lat = self.net.laterals[2].as_ref().expect("neck");
                    let out = self.net.outputs[2].as_ref().expect("neck");
                    let (m, lc) = lat.forward(p, c_out(2));
                    let (pm, oc) = out.forward(p, &m);
                    merged_shapes[2] = Some((m.height, m.width));
                    laterals[2] = Some(lc);
                    outputs[2] = Some(oc);
                    maps[2] = Some(pm);
                }
            }
            Architecture::Fpn => {
                let want = |l: FpnLevel| levels.contains(&l);
                let need_p = |i: usize| want(FpnLevel::ALL[i]) || (i == 3 && want(FpnLevel::P6));
                let lmin = (0..4).find(|&i| need_p(i));
                if let Some(lmin) = lmin {
                    let mut merged: Option<FeatureMap<T>> = None;
                    for i in (lmin..4).rev() {
                        let lat = self.net.laterals[i].as_ref().expect("fpn");
                        let (mut m, lc) = lat.forward(p, c_out(i));
                        if let Some(above) = &merged {
                            let up = upsample2x(above);
                            assert_eq!(up.shape(), m.shape(), "fpn top-down shapes");
                            m.add_assign(&up);
                        }
                        laterals[i] = Some(lc);
                        merged_shapes[i] = Some((m.height, m.width));
                        if need_p(i) {
                            let (pm, oc) = self.net.outputs[i].as_ref().expect("fpn").forward(p, &m);
                            outputs[i] = Some(oc);
                            maps[i] = Some(pm);
                        }
                        merged = Some(m);
                    }
                    if want(FpnLevel::P6) {
                        let p5 = maps[3].as_ref().expect("P5 computed for P6");
                        p5_shape = Some((p5.height, p5.width));
                        maps[4] = Some(subsample2x(p5));
                    }
                    if !want(FpnLevel::P5) && want(FpnLevel::P6) {
                        maps[3] = None;
                    }
                }
            }
        }
        let tape = FeatureTape {
            stem,
            stages,
            laterals,
            outputs,
            merged_shapes,
            p5_shape,
        };
        Ok((FpnFeatures { maps }, tape))
    }

    pub fn features_backward(&self, tape: FeatureTape<T>, dfeat: FeatureGrads<T>, grads: &mut ParamSet<T>) {
        let p = &self.params;
        let mut dp = dfeat.maps;
        if let Some(d6) = dp[4].take() {
            let (h, w) = tape.p5_shape.expect("P6 forward recorded");
            let d5 = subsample2x_backward(&d6, h, w);
            match &mut dp[3] {
                Some(m) => m.add_assign(&d5),
                slot => *slot = Some(d5),
            }
        }
        // Gradients w.r.t. the merged (pre-output-conv) maps.
        let mut dm: [Option<FeatureMap<T>>; 4] = Default::default();
        for i in 0..4 {
            if let Some(d) = dp[i].take() {
                let conv = self.net.outputs[i].as_ref().expect("output conv");
                let cache = tape.outputs[i].as_ref().expect("output conv forward recorded");
                dm[i] = conv.backward(p, grads, cache, &d, true);
            }
        }
        let n_stages = self.net.stages.len();
        let mut dc: Vec<Option<FeatureMap<T>>> = (0..n_stages).map(|_| None).collect();
        let mut carry: Option<FeatureMap<T>> = None;
        for i in 0..4 {
            let mut d = dm[i].take();
            if let Some(c) = carry.take() {
                match &mut d {
                    Some(m) => m.add_assign(&c),
                    None => d = Some(c),
                }
            }
            let Some(d) = d else { continue };
            assert_eq!(Some((d.height, d.width)), tape.merged_shapes[i]);
            let lat = self.net.laterals[i].as_ref().expect("lateral");
            let cache = tape.laterals[i].as_ref().expect("lateral forward recorded");
            dc[i] = lat.backward(p, grads, cache, &d, true);
            if self.config.architecture == Architecture::Fpn && i < 3 && tape.merged_shapes[i + 1].is_some() {
                carry = Some(upsample2x_backward(&d));
            }
        }
        let mut flow: Option<FeatureMap<T>> = None;
        for s in (0..n_stages).rev() {
            let mut d = dc[s].take();
            if let Some(f) = flow.take() {
                match &mut d {
                    Some(m) => m.add_assign(&f),
                    None => d = Some(f),
                }
            }
            let Some(mut d) = d else { continue };
            let convs = &self.net.stages[s];
            for (k, conv) in convs.iter().enumerate().rev() {
                let step = &tape.stages[s][k];
                relu_backward(&mut d.data, &step.out.data);
                d = conv.backward(p, grads, &step.cache, &d, true).expect("input grad");
            }
            flow = Some(d);
        }
        if let Some(mut d) = flow {
            relu_backward(&mut d.data, &tape.stem.out.data);
            self.net.stem.backward(p, grads, &tape.stem.cache, &d, false);
        }
    }

    pub fn rpn_level_train(&self, level: FpnLevel, map: &FeatureMap<T>) -> (RpnLevelOut<T>, RpnTape<T>) {
        let p = &self.params;
        let (mut hidden, conv) = self.net.rpn_conv.forward(p, map);
        relu_inplace(&mut hidden.data);
        let (cls_map, cls) = self.net.rpn_cls.forward(p, &hidden);
        let (reg_map, reg) = self.net.rpn_reg.forward(p, &hidden);
        let a = self.config.anchors_per_cell();
        let (h, w) = (map.height, map.width);
        let hw = h * w;
        let mut logits = vec![T::zero(); hw * a];
        let mut deltas = vec![T::zero(); hw * a * 4];
        for ai in 0..a {
            for pos in 0..hw {
                logits[pos * a + ai] = cls_map.data[ai * hw + pos];
                for k in 0..4 {
                    deltas[(pos * a + ai) * 4 + k] = reg_map.data[(ai * 4 + k) * hw + pos];
                }
            }
        }
        let out = RpnLevelOut {
            level,
            height: h,
            width: w,
            anchors_per_cell: a,
            logits,
            deltas,
        };
        (out, RpnTape { conv, hidden, cls, reg })
    }

    /// Returns the gradient w.r.t. the level's feature map.
    pub fn rpn_level_backward(&self, tape: RpnTape<T>, dlogits: &[T], ddeltas: &[T], grads: &mut ParamSet<T>) -> FeatureMap<T> {
        let p = &self.params;
        let a = self.config.anchors_per_cell();
        let (h, w) = (tape.hidden.height, tape.hidden.width);
        let hw = h * w;
        let mut dcls = FeatureMap::zeros(a, h, w);
        let mut dreg = FeatureMap::zeros(4 * a, h, w);
        for ai in 0..a {
            for pos in 0..hw {
                dcls.data[ai * hw + pos] = dlogits[pos * a + ai];
                for k in 0..4 {
                    dreg.data[(ai * 4 + k) * hw + pos] = ddeltas[(pos * a + ai) * 4 + k];
                }
            }
        }
        let mut dh = self.net.rpn_cls.backward(p, grads, &tape.cls, &dcls, true).expect("dx");
        dh.add_assign(&self.net.rpn_reg.backward(p, grads, &tape.reg, &dreg, true).expect("dx"));
        relu_backward(&mut dh.data, &tape.hidden.data);
        self.net.rpn_conv.backward(p, grads, &tape.conv, &dh, true).expect("dx")
    }

    /// Objectness logits and deltas for every anchor of
    /// [`DetectorConfig::anchor_grid`], in grid order.
    pub fn rpn_forward(&self, feats: &FpnFeatures<T>) -> RpnOutput<T> {
        let mut logits = Vec::new();
        let mut deltas = Vec::new();
        for &level in self.config.levels() {
            let (out, _) = self.rpn_level_train(level, feats.level(level));
            logits.extend(out.logits);
            deltas.extend(out.deltas);
        }
        RpnOutput { logits, deltas }
    }

    pub fn roi_request(&self, feats: &FpnFeatures<T>, b: &BBox) -> PoolRequest {
        let level = self.config.roi_level(b);
        let map = feats.level(level);
        PoolRequest {
            level,
            plan: PoolPlan::roi_align(
                map.height,
                map.width,
                b.to_array(),
                1.0 / level.stride() as f64,
                self.config.roi_size,
                self.config.roi_sampling,
            ),
        }
    }

    /// Row-major `n × (C·R·R)` pooled features.
    pub fn pool_rows(&self, feats: &FpnFeatures<T>, requests: &[PoolRequest]) -> Vec<T> {
        let mut rows = Vec::new();
        for r in requests {
            rows.extend(r.plan.apply(feats.level(r.level)));
        }
        rows
    }

    pub fn pool_backward(&self, feats: &FpnFeatures<T>, requests: &[PoolRequest], drows: &[T], dfeat: &mut FeatureGrads<T>) {
        let width = self.row_width();
        for (r, d) in requests.iter().zip(drows.chunks(width)) {
            let map = feats.level(r.level);
            r.plan.backprop(d, dfeat.entry(r.level, map));
        }
    }

    pub fn row_width(&self) -> usize {
        self.config.fpn_channels * self.config.roi_size * self.config.roi_size
    }

    pub fn head_train(&self, rows: Vec<T>, n: usize) -> (HeadOut<T>, HeadTape<T>) {
        let p = &self.params;
        let mut h1 = self.net.fc1.forward(p, &rows, n);
        relu_inplace(&mut h1);
        let mut h2 = self.net.fc2.forward(p, &h1, n);
        relu_inplace(&mut h2);
        let cls = self.net.cls.forward(p, &h2, n);
        let deltas = self.net.reg.forward(p, &h2, n);
        (HeadOut { n, cls, deltas }, HeadTape { x: rows, h1, h2, n })
    }

    /// Returns the gradient w.r.t. the pooled rows.
    pub fn head_backward(&self, tape: HeadTape<T>, dcls: &[T], ddeltas: &[T], grads: &mut ParamSet<T>) -> Vec<T> {
        let p = &self.params;
        let n = tape.n;
        let mut dh2 = self.net.cls.backward(p, grads, &tape.h2, dcls, n, true).expect("dx");
        let dr = self.net.reg.backward(p, grads, &tape.h2, ddeltas, n, true).expect("dx");
        for (a, b) in dh2.iter_mut().zip(dr) {
            *a += b;
        }
        relu_backward(&mut dh2, &tape.h2);
        let mut dh1 = self.net.fc2.backward(p, grads, &tape.h1, &dh2, n, true).expect("dx");
        relu_backward(&mut dh1, &tape.h1);
        self.net.fc1.backward(p, grads, &tape.x, &dh1, n, true).expect("dx")
    }

    /// Class logits and class-agnostic deltas for each proposal.
    pub fn roi_forward(&self, feats: &FpnFeatures<T>, proposals: &[BBox]) -> HeadOut<T> {
        let requests: Vec<PoolRequest> = proposals.iter().map(|b| self.roi_request(feats, b)).collect();
        let rows = self.pool_rows(feats, &requests);
        self.head_train(rows, proposals.len()).0
    }

    /// Top-scoring decoded anchors after NMS, clipped to the
    /// `height × width` image area.
    pub fn propose(&self, grid: &AnchorGrid, rpn: &RpnOutput<T>, height: usize, width: usize) -> Vec<(BBox, f64)> {
        let cfg = &self.config;
        let coder = cfg.coder();
        let mut order: Vec<usize> = (0..grid.len()).collect();
        order.sort_by(|&a, &b| rpn.logits[b].f64().total_cmp(&rpn.logits[a].f64()).then(a.cmp(&b)));
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for &i in order.iter().take(cfg.rpn_pre_nms) {
            let d = &rpn.deltas[i * 4..i * 4 + 4];
            let b = coder
                .decode([d[0].f64(), d[1].f64(), d[2].f64(), d[3].f64()], &grid.anchors[i])
                .clipped(width as f64, height as f64);
            if b.width() >= cfg.min_proposal_side && b.height() >= cfg.min_proposal_side && b.is_valid() {
                boxes.push(b);
                scores.push(rpn.logits[i].f64());
            }
        }
        nms(&boxes, &scores, cfg.rpn_nms_iou)
            .into_iter()
            .take(cfg.rpn_post_nms)
            .map(|i| (boxes[i], scores[i]))
            .collect()
    }

    /// Detections on a prepared input, in input pixel coordinates.
    pub fn predict_prepared(&self, img: &PreparedImage<T>) -> Result<Vec<Detection>> {
        let cfg = &self.config;
        let feats = self.forward_backbone(&img.input)?;
        let rpn = self.rpn_forward(&feats);
        let grid = cfg.anchor_grid(img.input.height, img.input.width);
        let proposals: Vec<BBox> = self
            .propose(&grid, &rpn, img.height, img.width)
            .into_iter()
            .map(|(b, _)| b)
            .collect();
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let head = self.roi_forward(&feats, &proposals);
        let k1 = cfg.num_classes + 1;
        let coder = cfg.coder();
        let mut per_class: Vec<(Vec<BBox>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); cfg.num_classes];
        for (i, prop) in proposals.iter().enumerate() {
            let logits: Vec<f64> = head.cls[i * k1..(i + 1) * k1].iter().map(|v| v.f64()).collect();
            let probs = softmax(&logits);
            let d = &head.deltas[i * 4..i * 4 + 4];
            let b = coder
                .decode([d[0].f64(), d[1].f64(), d[2].f64(), d[3].f64()], prop)
                .clipped(img.width as f64, img.height as f64);
            if !b.is_valid() {
                continue;
            }
            for (c, slot) in per_class.iter_mut().enumerate() {
                let s = probs[c + 1];
                if s > cfg.score_threshold {
                    slot.0.push(b);
                    slot.1.push(s);
                }
            }
        }
        let mut dets = Vec::new();
        for (c, (boxes, scores)) in per_class.iter().enumerate() {
            for i in nms(boxes, scores, cfg.test_nms_iou) {
                dets.push(Detection {
                    bbox: boxes[i],
                    class_id: c,
                    score: scores[i],
                });
            }
        }
        dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id)));
        dets.truncate(cfg.max_detections);
        Ok(dets)
    }

    /// Full two-stage inference on a source image; boxes are returned in
    /// source pixel coordinates.
    pub fn predict(&self, image: &RgbImage) -> Result<Vec<Detection>> {
        let prepared = prepare_image(image, &self.config.resize, &self.config);
        let inv = 1.0 / prepared.scale;
        Ok(self
            .predict_prepared(&prepared)?
            .into_iter()
            .map(|d| Detection {
                bbox: d.bbox.scaled(inv, inv),
                ..d
            })
            .collect())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
