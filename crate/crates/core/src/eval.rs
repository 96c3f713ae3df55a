//! VOC-style AP@IoU evaluation and the improper-negative diagnostic.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{BBox, ClassSplit, Dataset};
use crate::detector::{Detection, Detector, DetectorConfig};
use crate::error::Result;
use crate::geometry::{iou, match_anchors, AnchorLabel, MatchResult};
use crate::raster::{round_up, ResizePolicy};

/// A detection of one class on image `image`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Area under the monotone precision envelope over all recall points.
pub fn ap_from_curve(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    mrec.push(0.0);
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = Vec::with_capacity(precision.len() + 2);
    mpre.push(0.0);
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (0..mrec.len() - 1)
        .filter(|&i| mrec[i + 1] != mrec[i])
        .map(|i| (mrec[i + 1] - mrec[i]) * mpre[i + 1])
        .sum()
}

/// Per-detection true-positive flags after greedy matching in descending
/// score order (ties keep input order). A detection is a true positive if
/// its best-IoU ground truth in the same image reaches `iou_thr` and has
/// not been claimed yet.
pub fn match_detections(dets: &[ScoredBox], gts: &[Vec<BBox>], iou_thr: f64) -> (Vec<usize>, Vec<bool>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let tp = order
        .iter()
        .map(|&i| {
            let d = &dets[i];
            let best = gts[d.image]
                .iter()
                .enumerate()
                .map(|(j, g)| (j, iou(&d.bbox, g)))
                .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                    Some(a) if a.1 >= x.1 => Some(a),
                    _ => Some(x),
                });
            match best {
                Some((j, v)) if v >= iou_thr && !claimed[d.image][j] => {
                    claimed[d.image][j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    (order, tp)
}

/// AP of one class; `None` when the class has no ground truth.
pub fn voc_ap(dets: &[ScoredBox], gts: &[Vec<BBox>], iou_thr: f64) -> Option<f64> {
    let npos: usize = gts.iter().map(Vec::len).sum();
    if npos == 0 {
        return None;
    }
    let (_, tp) = match_detections(dets, gts, iou_thr);
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut ctp = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        ctp += t as usize;
        recall.push(ctp as f64 / npos as f64);
        precision.push(ctp as f64 / (i + 1) as f64);
    }
    Some(ap_from_curve(&recall, &precision))
}

/// Negative anchors whose overlap with some ground truth covers at least
/// `threshold` of the anchor's own area.
pub fn improper_negative_count(anchors: &[BBox], m: &MatchResult, gts: &[BBox], threshold: f64) -> usize {
    anchors
        .iter()
        .zip(&m.labels)
        .filter(|(a, &l)| {
            l == AnchorLabel::Negative && gts.iter().any(|g| a.intersection_area(g) / a.area() >= threshold)
        })
        .count()
}

pub const IMPROPER_NEGATIVE_THRESHOLD: f64 = 0.3;

/// Improper negatives of one image resized to each shorter side in turn
/// (longer side capped at `longer_ratio` times the shorter one).
pub fn improper_negatives_per_scale(
    width: u32,
    height: u32,
    gts: &[BBox],
    sides: &[f64],
    longer_ratio: f64,
    det: &DetectorConfig,
) -> Vec<usize> {
    sides
        .iter()
        .map(|&s| {
            let policy = ResizePolicy::new(s, s * longer_ratio);
            let f = policy.factor(width as f64, height as f64);
            let (w, h) = policy.output_size(width as usize, height as usize);
            let grid = det.anchor_grid(round_up(h, 64), round_up(w, 64));
            let scaled: Vec<BBox> = gts.iter().map(|b| b.scaled(f, f)).collect();
            let m = match_anchors(&grid, &scaled, det.rpn_pos_iou, det.rpn_neg_iou, &det.coder());
            improper_negative_count(&grid.anchors, &m, &scaled, IMPROPER_NEGATIVE_THRESHOLD)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub novel: bool,
    pub num_gt: usize,
    pub num_detections: usize,
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub per_class: Vec<ClassAp>,
    pub novel_map: Option<f64>,
    pub base_map: Option<f64>,
    pub num_images: usize,
    pub num_detections: usize,
    pub config_hash: String,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    /// Builds the report from per-image detections aligned with
    /// `dataset.images`.
    pub fn from_detections(
        dataset: &Dataset,
        split: &ClassSplit,
        detections: &[Vec<Detection>],
        iou_threshold: f64,
        config_hash: String,
    ) -> Self {
        let k = dataset.num_classes();
        let per_class: Vec<ClassAp> = (0..k)
            .map(|c| {
                let gts: Vec<Vec<BBox>> = dataset
                    .images
                    .iter()
                    .map(|img| {
                        img.annotations
                            .iter()
                            .filter(|a| a.class_id == c)
                            .map(|a| a.bbox)
                            .collect()
                    })
                    .collect();
                let dets: Vec<ScoredBox> = detections
                    .iter()
                    .enumerate()
                    .flat_map(|(i, ds)| {
                        ds.iter().filter(|d| d.class_id == c).map(move |d| ScoredBox {
                            image: i,
                            bbox: d.bbox,
                            score: d.score,
                        })
                    })
                    .collect();
                let ap = voc_ap(&dets, &gts, iou_threshold);
                if ap.is_none() {
                    warn!("class {c} has no ground truth; excluded from means");
                }
                ClassAp {
                    class_id: c,
                    name: dataset.classes[c].clone(),
                    novel: split.novel_classes.contains(&c),
                    num_gt: gts.iter().map(Vec::len).sum(),
                    num_detections: dets.len(),
                    ap,
                }
            })
            .collect();
        let group = |novel: bool| mean(per_class.iter().filter(|c| c.novel == novel).filter_map(|c| c.ap));
        Self {
            iou_threshold,
            novel_map: group(true),
            base_map: group(false),
            num_images: dataset.images.len(),
            num_detections: detections.iter().map(Vec::len).sum(),
            per_class,
            config_hash,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }

    /// `class_id,name,group,num_gt,num_detections,ap`; undefined AP is an
    /// empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,name,group,num_gt,num_detections,ap\n");
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.class_id,
                c.name,
                if c.novel { "novel" } else { "base" },
                c.num_gt,
                c.num_detections,
                c.ap.map(|v| v.to_string()).unwrap_or_default()
            );
        }
        out
    }
}

/// Digest of the detector configuration and weights.
pub fn config_hash(det: &Detector<f32>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&det.config).expect("serializable config"));
    for (name, t) in det.params.iter() {
        h.update(name.as_bytes());
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())[..16].to_string()
}

/// Runs inference over every image and scores it at IoU 0.5.
pub fn evaluate(det: &Detector<f32>, dataset: &Dataset, split: &ClassSplit) -> Result<EvalReport> {
    let mut detections = Vec::with_capacity(dataset.images.len());
    for img in &dataset.images {
        let px = dataset.load_pixels(img)?;
        detections.push(det.predict(&px)?);
    }
    Ok(EvalReport::from_detections(dataset, split, &detections, 0.5, config_hash(det)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sb(image: usize, b: BBox, score: f64) -> ScoredBox {
        ScoredBox { image, bbox: b, score }
    }

    #[test]
    fn hand_built_curves() {
        let g = BBox::raw(0.0, 0.0, 10.0, 10.0);
        assert_eq!(voc_ap(&[sb(0, g, 0.9)], &[vec![g]], 0.5), Some(1.0));
        let fp = BBox::raw(50.0, 50.0, 60.0, 60.0);
        assert_eq!(voc_ap(&[sb(0, fp, 0.9), sb(0, g, 0.8)], &[vec![g]], 0.5), Some(0.5));
        assert_eq!(voc_ap(&[], &[vec![g]], 0.5), Some(0.0));
        assert_eq!(voc_ap(&[sb(0, g, 0.9)], &[vec![]], 0.5), None);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let g = BBox::raw(0.0, 0.0, 10.0, 10.0);
        let (_, tp) = match_detections(&[sb(0, g, 0.9), sb(0, g, 0.8)], &[vec![g]], 0.5);
        assert_eq!(tp, vec![true, false]);
    }

    #[test]
    fn improper_negative_containment() {
        let anchors = vec![BBox::raw(10.0, 10.0, 20.0, 20.0)];
        let gts = vec![BBox::raw(0.0, 0.0, 100.0, 100.0)];
        let m = crate::geometry::match_boxes(&anchors, &gts, 0.7, 0.3, &Default::default());
        // The only anchor is the GT's best match, hence positive.
        assert_eq!(improper_negative_count(&anchors, &m, &gts, 0.3), 0);
        let anchors = vec![BBox::raw(10.0, 10.0, 20.0, 20.0), BBox::raw(0.0, 0.0, 90.0, 90.0)];
        let m = crate::geometry::match_boxes(&anchors, &gts, 0.7, 0.3, &Default::default());
        assert_eq!(m.labels[0], AnchorLabel::Negative);
        assert!(iou(&anchors[0], &gts[0]) < 0.3);
        assert_eq!(improper_negative_count(&anchors, &m, &gts, 0.3), 1);
        assert_eq!(improper_negative_count(&anchors, &m, &[], 0.3), 0);
    }
}
