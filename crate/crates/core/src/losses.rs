//! RPN and RoI-head losses, with and without refinement samples.
//!
//! Every function returns the loss value together with its gradient
//! w.r.t. each input logit/offset, so the trainer never differentiates
//! these terms itself. Values are computed in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Smooth-L1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinarySample {
    pub logit: f64,
    pub positive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegSample {
    pub pred: [f64; 4],
    pub target: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSample {
    pub logits: Vec<f64>,
    pub label: usize,
}

/// Numerically stable `-log σ(±x)`.
pub fn bce_with_logit(logit: f64, positive: bool) -> f64 {
    let z = if positive { logit } else { -logit };
    // log(1 + e^{-z})
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn bce_grad(logit: f64, positive: bool) -> f64 {
    sigmoid(logit) - if positive { 1.0 } else { 0.0 }
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * a * a / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < SMOOTH_L1_BETA {
        x / SMOOTH_L1_BETA
    } else {
        x.signum()
    }
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn cross_entropy_grad(logits: &[f64], label: usize, scale: f64) -> Vec<f64> {
    let p = crate::detector::softmax(logits);
    p.into_iter()
        .enumerate()
        .map(|(i, v)| scale * (v - if i == label { 1.0 } else { 0.0 }))
        .collect()
}

fn reg_term(samples: &[RegSample], norm: f64) -> (f64, Vec<[f64; 4]>) {
    let mut total = 0.0;
    let grads = samples
        .iter()
        .map(|s| {
            let mut g = [0.0; 4];
            for k in 0..4 {
                let d = s.pred[k] - s.target[k];
                total += smooth_l1(d);
                g[k] = smooth_l1_grad(d) / norm;
            }
            g
        })
        .collect();
    (total / norm, grads)
}

/// RPN loss with per-sample gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnLoss {
    /// Classification summed over main samples, divided by `N + M`.
    pub cls_main: f64,
    /// Classification summed over refinement samples, divided by `N + M`.
    pub cls_refine: f64,
    pub reg: f64,
    pub n_obj: usize,
    pub m_obj: usize,
    pub d_main: Vec<f64>,
    pub d_reg: Vec<[f64; 4]>,
    pub d_refine: Vec<f64>,
}

impl RpnLoss {
    pub fn cls(&self) -> f64 {
        self.cls_main + self.cls_refine
    }

    pub fn total(&self) -> f64 {
        self.cls() + self.reg
    }
}

/// Binary classification over the `N_obj` sampled anchors plus regression
/// over the positives among them, both normalized by `N_obj`. `reg` holds
/// exactly the positives' predictions and targets.
pub fn rpn_loss_baseline(main: &[BinarySample], reg: &[RegSample]) -> Result<RpnLoss> {
    rpn_loss_mpsr(main, reg, &[])
}

/// As [`rpn_loss_baseline`] with refinement positives joining the
/// classification term, normalized by `N_obj + M_obj`; regression stays
/// over main positives divided by `N_obj`.
pub fn rpn_loss_mpsr(main: &[BinarySample], reg: &[RegSample], refine: &[BinarySample]) -> Result<RpnLoss> {
    let n = main.len();
    if n == 0 {
        return Err(Error::Empty("RPN loss needs at least one sampled anchor"));
    }
    let norm = (n + refine.len()) as f64;
    let cls_main = main.iter().map(|s| bce_with_logit(s.logit, s.positive)).sum::<f64>() / norm;
    let cls_refine = refine.iter().map(|s| bce_with_logit(s.logit, s.positive)).sum::<f64>() / norm;
    let (reg_loss, d_reg) = reg_term(reg, n as f64);
    Ok(RpnLoss {
        cls_main,
        cls_refine,
        reg: reg_loss,
        n_obj: n,
        m_obj: refine.len(),
        d_main: main.iter().map(|s| bce_grad(s.logit, s.positive) / norm).collect(),
        d_reg,
        d_refine: refine.iter().map(|s| bce_grad(s.logit, s.positive) / norm).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiLoss {
    pub cls: f64,
    pub reg: f64,
    /// `(λ / M_RoI)·Σ CE` over refinement samples.
    pub refine: f64,
    pub n_roi: usize,
    pub m_roi: usize,
    pub lambda: f64,
    pub d_main: Vec<Vec<f64>>,
    pub d_reg: Vec<[f64; 4]>,
    pub d_refine: Vec<Vec<f64>>,
}

impl RoiLoss {
    pub fn total(&self) -> f64 {
        self.cls + self.reg + self.refine
    }
}

/// (K+1)-way cross-entropy over the `N_RoI` sampled RoIs plus
/// class-agnostic regression over the foreground ones, both normalized by
/// `N_RoI`.
pub fn roi_loss_baseline(main: &[ClassSample], reg: &[RegSample]) -> Result<RoiLoss> {
    let n = main.len();
    if n == 0 {
        return Err(Error::Empty("RoI loss needs at least one sampled RoI"));
    }
    let norm = n as f64;
    let cls = main.iter().map(|s| cross_entropy(&s.logits, s.label)).sum::<f64>() / norm;
    let (reg_loss, d_reg) = reg_term(reg, norm);
    Ok(RoiLoss {
        cls,
        reg: reg_loss,
        refine: 0.0,
        n_roi: n,
        m_roi: 0,
        lambda: 0.0,
        d_main: main.iter().map(|s| cross_entropy_grad(&s.logits, s.label, 1.0 / norm)).collect(),
        d_reg,
        d_refine: Vec::new(),
    })
}

/// Baseline terms plus `(λ / M_RoI)·Σ CE` over the refinement samples.
pub fn roi_loss_mpsr(main: &[ClassSample], reg: &[RegSample], refine: &[ClassSample], lambda: f64) -> Result<RoiLoss> {
    let mut out = roi_loss_baseline(main, reg)?;
    if refine.is_empty() {
        return Err(Error::Empty("RoI refinement enabled without refinement samples"));
    }
    let scale = lambda / refine.len() as f64;
    out.refine = scale * refine.iter().map(|s| cross_entropy(&s.logits, s.label)).sum::<f64>();
    out.m_roi = refine.len();
    out.lambda = lambda;
    out.d_refine = refine
        .iter()
        .map(|s| cross_entropy_grad(&s.logits, s.label, scale))
        .collect();
    Ok(out)
}

/// All loss terms of one training step; `total` is their sum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_bcls: f64,
    pub rpn_reg: f64,
    pub roi_kcls: f64,
    pub roi_reg: f64,
    pub refine_rpn_bcls: f64,
    pub refine_roi_kcls: f64,
    pub n_obj: usize,
    pub m_obj: usize,
    pub n_roi: usize,
    pub m_roi: usize,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(rpn: &RpnLoss, roi: &RoiLoss) -> Self {
        Self {
            rpn_bcls: rpn.cls_main,
            rpn_reg: rpn.reg,
            roi_kcls: roi.cls,
            roi_reg: roi.reg,
            refine_rpn_bcls: rpn.cls_refine,
            refine_roi_kcls: roi.refine,
            n_obj: rpn.n_obj,
            m_obj: rpn.m_obj,
            n_roi: roi.n_roi,
            m_roi: roi.m_roi,
            lambda: roi.lambda,
            total: rpn.total() + roi.total(),
        }
    }
}
