//! k-shot and limited-scale subset construction plus object-scale
//! histograms.
//!
//! Object scale is `s = sqrt(w·h)` measured after resizing the image with a
//! [`ResizePolicy`]; histograms bin that value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Annotation, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::object_scale;
use crate::raster::ResizePolicy;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KShotConfig {
    pub k: usize,
    pub seed: u64,
    pub classes: BTreeSet<usize>,
}

impl KShotConfig {
    pub fn new(k: usize, seed: u64, classes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            k,
            seed,
            classes: classes.into_iter().collect(),
        }
    }
}

/// Half-open scale interval `[lo, hi)` on `s = sqrt(area)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRange {
    pub lo: f64,
    pub hi: f64,
}

impl ScaleRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo < 0.0 || lo >= hi {
            return Err(Error::InvalidInput(format!(
                "scale range requires 0 <= lo < hi, got [{lo}, {hi})"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn unbounded() -> Self {
        Self {
            lo: 0.0,
            hi: f64::INFINITY,
        }
    }

    pub fn contains(&self, s: f64) -> bool {
        s >= self.lo && s < self.hi
    }
}

/// Scale of `ann` after resizing its image of `width × height` by `policy`.
pub fn resized_scale(ann: &Annotation, width: u32, height: u32, policy: &ResizePolicy) -> f64 {
    object_scale(&ann.bbox) * policy.factor(width as f64, height as f64)
}

type InstanceRef = (usize, usize);

fn sample_subset(
    dataset: &Dataset,
    cfg: &KShotConfig,
    keep: impl Fn(&ImageRecord, &Annotation) -> bool,
    on_short: impl Fn(&BTreeMap<usize, usize>) -> Error,
) -> Result<Dataset> {
    if cfg.k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let mut pools: BTreeMap<usize, Vec<InstanceRef>> =
        cfg.classes.iter().map(|&c| (c, Vec::new())).collect();
    for (i, img) in dataset.images.iter().enumerate() {
        for (j, ann) in img.annotations.iter().enumerate() {
            if let Some(pool) = pools.get_mut(&ann.class_id) {
                if keep(img, ann) {
                    pool.push((i, j));
                }
            }
        }
    }
    let counts: BTreeMap<usize, usize> = pools.iter().map(|(&c, p)| (c, p.len())).collect();
    if counts.values().any(|&n| n < cfg.k) {
        return Err(on_short(&counts));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut selected: BTreeSet<InstanceRef> = BTreeSet::new();
    for pool in pools.values() {
        let picks = rand::seq::index::sample(&mut rng, pool.len(), cfg.k);
        selected.extend(picks.iter().map(|p| pool[p]));
    }
    let images = dataset
        .images
        .iter()
        .enumerate()
        .filter_map(|(i, img)| {
            let annotations: Vec<Annotation> = img
                .annotations
                .iter()
                .enumerate()
                .filter(|(j, _)| selected.contains(&(i, *j)))
                .map(|(_, a)| a.clone())
                .collect();
            (!annotations.is_empty()).then(|| ImageRecord {
                annotations,
                ..img.clone()
            })
        })
        .collect();
    Ok(Dataset {
        classes: dataset.classes.clone(),
        images,
        root: dataset.root.clone(),
    })
}

/// Exactly `k` annotated instances per class in `cfg.classes`, sampled
/// uniformly without replacement. Unselected instances (of any class) are
/// dropped from the kept images; images without a selected instance are
/// dropped entirely.
pub fn build_kshot_subset(dataset: &Dataset, cfg: &KShotConfig) -> Result<Dataset> {
    sample_subset(
        dataset,
        cfg,
        |_, _| true,
        |counts| {
            let (&class, &available) = counts
                .iter()
                .find(|(_, &n)| n < cfg.k)
                .expect("some class is short");
            Error::InsufficientInstances {
                class,
                available,
                k: cfg.k,
            }
        },
    )
}

/// As [`build_kshot_subset`], drawing only from instances whose resized
/// scale lies in `range`.
pub fn build_limited_scale_subset(
    dataset: &Dataset,
    cfg: &KShotConfig,
    range: &ScaleRange,
    policy: &ResizePolicy,
) -> Result<Dataset> {
    sample_subset(
        dataset,
        cfg,
        |img, ann| range.contains(resized_scale(ann, img.width, img.height, policy)),
        |counts| Error::InsufficientInRange {
            lo: range.lo,
            hi: range.hi,
            counts: counts
                .iter()
                .map(|(c, n)| format!("class {c}: {n} in range (need {})", cfg.k))
                .collect::<Vec<_>>()
                .join(", "),
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleHistogram {
    /// Bin edges; bin `i` is `[edges[i], edges[i+1])`.
    pub edges: Vec<f64>,
    pub class_names: Vec<String>,
    /// `counts[class][bin]`.
    pub counts: Vec<Vec<usize>>,
    /// Instances whose scale fell outside `[edges[0], edges[last])`.
    pub out_of_range: usize,
    pub policy: ResizePolicy,
}

impl ScaleHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn class_total(&self, class: usize) -> usize {
        self.counts[class].iter().sum()
    }

    /// Index of the most populated bin of `class` (first on ties).
    pub fn mode_bin(&self, class: usize) -> Option<usize> {
        let row = &self.counts[class];
        let max = *row.iter().max()?;
        (max > 0).then(|| row.iter().position(|&c| c == max).unwrap())
    }

    /// `class,bin_lo,bin_hi,count` rows for every class and bin.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,bin_lo,bin_hi,count\n");
        for (c, row) in self.counts.iter().enumerate() {
            for (b, count) in row.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    self.class_names[c],
                    self.edges[b],
                    self.edges[b + 1],
                    count
                );
            }
        }
        out
    }
}

/// Histogram of resized object scales per class.
pub fn scale_histogram(dataset: &Dataset, edges: &[f64], policy: ResizePolicy) -> Result<ScaleHistogram> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput(
            "histogram bin edges must be strictly increasing with at least two entries".into(),
        ));
    }
    let nbins = edges.len() - 1;
    let mut counts = vec![vec![0usize; nbins]; dataset.num_classes()];
    let mut out_of_range = 0;
    for img in &dataset.images {
        for ann in &img.annotations {
            let s = resized_scale(ann, img.width, img.height, &policy);
            // Last edge with edge <= s, if it opens a bin.
            let bin = edges.partition_point(|&e| e <= s);
            if bin == 0 || bin > nbins {
                out_of_range += 1;
            } else {
                counts[ann.class_id][bin - 1] += 1;
            }
        }
    }
    Ok(ScaleHistogram {
        edges: edges.to_vec(),
        class_names: dataset.classes.clone(),
        counts,
        out_of_range,
        policy,
    })
}

/// Uniform bins of `width` pixels from 0 to `max`, plus a final open bin.
pub fn default_scale_edges(width: f64, max: f64) -> Vec<f64> {
    let n = (max / width).ceil() as usize;
    let mut edges: Vec<f64> = (0..=n).map(|i| i as f64 * width).collect();
    edges.push(f64::INFINITY);
    edges
}
