//! Random loss batches.

use mpsr::losses::{BinarySample, ClassSample, RegSample};
use rand::Rng;

pub struct Batch {
    pub main: Vec<(f64, bool)>,
    pub reg_pred: Vec<[f64; 4]>,
    pub reg_target: Vec<[f64; 4]>,
    pub refine: Vec<(f64, bool)>,
    pub roi_main: Vec<(Vec<f64>, usize)>,
    pub roi_pred: Vec<[f64; 4]>,
    pub roi_target: Vec<[f64; 4]>,
    pub roi_refine: Vec<(Vec<f64>, usize)>,
    pub lambda: f64,
}

pub fn quad<R: Rng>(rng: &mut R) -> [f64; 4] {
    std::array::from_fn(|_| rng.random_range(-3.0..3.0))
}

pub fn random_batch<R: Rng>(rng: &mut R) -> Batch {
    let k1 = rng.random_range(2..7);
    let n = rng.random_range(1..40);
    let m = rng.random_range(0..30);
    let main: Vec<(f64, bool)> = (0..n).map(|_| (rng.random_range(-8.0..8.0), rng.random_bool(0.4))).collect();
    let npos = main.iter().filter(|s| s.1).count();
    let logits = |rng: &mut R| -> Vec<f64> { (0..k1).map(|_| rng.random_range(-6.0..6.0)).collect() };
    let nr = rng.random_range(1..30);
    let roi_main: Vec<(Vec<f64>, usize)> = (0..nr).map(|_| (logits(rng), rng.random_range(0..k1))).collect();
    let nfg = roi_main.iter().filter(|s| s.1 > 0).count();
    let mr = rng.random_range(0..8);
    Batch {
        reg_pred: (0..npos).map(|_| quad(rng)).collect(),
        reg_target: (0..npos).map(|_| quad(rng)).collect(),
        refine: (0..m).map(|_| (rng.random_range(-8.0..8.0), rng.random_bool(0.9))).collect(),
        roi_pred: (0..nfg).map(|_| quad(rng)).collect(),
        roi_target: (0..nfg).map(|_| quad(rng)).collect(),
        roi_refine: (0..mr).map(|_| (logits(rng), rng.random_range(1..k1))).collect(),
        lambda: rng.random_range(0.0..1.0),
        main,
        roi_main,
    }
}

pub fn bin(v: &[(f64, bool)]) -> Vec<BinarySample> {
    v.iter().map(|&(logit, positive)| BinarySample { logit, positive }).collect()
}

pub fn reg(p: &[[f64; 4]], t: &[[f64; 4]]) -> Vec<RegSample> {
    p.iter().zip(t).map(|(&pred, &target)| RegSample { pred, target }).collect()
}

pub fn cls(v: &[(Vec<f64>, usize)]) -> Vec<ClassSample> {
    v.iter().map(|(logits, label)| ClassSample { logits: logits.clone(), label: *label }).collect()
}
