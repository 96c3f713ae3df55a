//! Finite-difference gradient checks on a tiny network in double precision.

use mpsr::detector::Detector;
use mpsr::trainer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{shapes, tiny_config, tiny_train};

pub fn plan_for(mode: Mode, seed: u64) -> (Detector<f64>, StepPlan) {
    let data = shapes(seed, 6);
    let det = Detector::<f32>::new(tiny_config(3), seed).unwrap();
    let mut t = Trainer::new(tiny_train(mode), Stage::Base, det, data).unwrap();
    // A few steps move the weights away from initialization.
    for _ in 0..3 {
        t.step().unwrap();
    }
    let plan = t.plan_step().unwrap();
    (t.detector.cast::<f64>(), plan)
}

fn total(det: &Detector<f64>, plan: &StepPlan) -> f64 {
    loss_and_grad(det, plan).unwrap().0.total
}

/// Central differences on `n` randomly drawn scalars. Points where the two
/// one-sided differences disagree sit on a ReLU kink and are redrawn.
/// Returns the worst relative error and the number of kinks skipped.
pub fn check(mut det: Detector<f64>, plan: &StepPlan, n: usize, seed: u64) -> (f64, usize) {
    let (_, grads) = loss_and_grad(&det, plan).unwrap();
    let ids: Vec<_> = det.params.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let base = total(&det, plan);
    let (mut checked, mut kinks, mut worst) = (0, 0, 0.0f64);
    while checked < n {
        // Cycle through tensors so every layer is covered.
        let id = ids[(checked + kinks) % ids.len()];
        let j = rng.random_range(0..det.params.get(id).numel());
        let w = det.params.get(id).data[j];
        det.params.get_mut(id).data[j] = w + h;
        let up = total(&det, plan);
        det.params.get_mut(id).data[j] = w - h;
        let down = total(&det, plan);
        det.params.get_mut(id).data[j] = w;
        let (fwd, bwd) = ((up - base) / h, (base - down) / h);
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-4) {
            kinks += 1;
            assert!(kinks < n, "too many kinks");
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(id).data[j];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        assert!(rel < 1e-3, "{}[{j}]: analytic {analytic} numeric {numeric}", det.params.name(id));
        worst = worst.max(rel);
        checked += 1;
    }
    (worst, kinks)
}
