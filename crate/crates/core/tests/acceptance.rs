//! Acceptance gate: runs every criterion and prints one PASS/FAIL line per
//! criterion. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- 1 3 8`.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::batch::{bin, cls, random_batch, reg};
use common::{oracle_ap, oracle_roi, oracle_rpn, shapes, tiny_config, tiny_train};
use mpsr::benchmark::*;
use mpsr::checkpoint::Checkpoint;
use mpsr::datamodel::{Annotation, BBox, ClassSplit};
use mpsr::detector::{Detection, Detector, DetectorConfig};
use mpsr::eval::*;
use mpsr::fewshot::{build_kshot_subset, KShotConfig};
use mpsr::geometry::{CropConfig, FpnLevel};
use mpsr::losses::*;
use mpsr::mpsr::*;
use mpsr::raster::RgbImage;
use mpsr::trainer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, format!("took {t:.1?}, limit {limit:?}"))
}

fn c1_level_table() -> Outcome {
    use FpnLevel::*;
    let start = Instant::now();
    let rpn = [P2, P3, P4, P5, P6, P6];
    let roi = [P2, P2, P2, P3, P4, P5];
    let mut entries = 0;
    for (i, row) in level_table().iter().enumerate() {
        ensure(row.rpn_level == rpn[i], format!("rpn level of scale {}", PYRAMID_SIDES[i]))?;
        ensure(row.roi_level == roi[i], format!("roi level of scale {}", PYRAMID_SIDES[i]))?;
        ensure(assign_levels(i) == (rpn[i], roi[i]), "assign_levels disagrees with table")?;
        entries += 2;
    }
    ensure(PYRAMID_SIDES == [32, 64, 128, 256, 512, 800], "pyramid sides")?;
    within(start, Duration::from_secs(1))?;
    Ok(format!("{entries}/12 entries exact"))
}

fn c2_selection_rule() -> Outcome {
    let start = Instant::now();
    let img = RgbImage::filled(500, 375, [0.4, 0.4, 0.4]);
    let mut crops = 0;
    let mut ablation_negatives = 0;
    // A large object and a small one, in the spirit of the improper
    // negatives illustration.
    for (seed, b) in [BBox::raw(60.0, 40.0, 420.0, 340.0), BBox::raw(300.0, 200.0, 340.0, 250.0)].into_iter().enumerate() {
        let ann = Annotation {
            bbox: b,
            class_id: 0,
            image_id: "fixture".into(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let p = build_object_pyramid(&img, &ann, &PyramidScaleSet::default(), &CropConfig::default(), &mut rng)
            .map_err(|e| e.to_string())?;
        for crop in &p.crops {
            let (rpn_level, _) = assign_levels(crop.scale_index);
            let n = crop.content_cells(rpn_level);
            if n < 2 {
                continue;
            }
            let t = manual_targets(crop, 0);
            ensure(t.positives() == 12 && t.negatives() == 0, format!("scale {}: {} pos {} neg", crop.side, t.positives(), t.negatives()))?;
            let cells: BTreeSet<(usize, usize)> = t.rpn_samples.iter().map(|s| (s.y, s.x)).collect();
            let ratios: BTreeSet<usize> = t.rpn_samples.iter().map(|s| s.ratio).collect();
            ensure(cells.len() == 4 && ratios.len() == 3, "4 cells x 3 ratios")?;
            let m = anchor_match_targets(crop, 0, 0.7, 0.3, 24, &mut rng);
            ablation_negatives += m.negatives();
            crops += 1;
        }
    }
    for n in 2..=100 {
        ensure(select_rpn_positives(n, n).len() == 12, format!("{n}x{n} map"))?;
    }
    ensure(ablation_negatives >= 1, "anchor matching produced no negatives")?;
    within(start, Duration::from_secs(60))?;
    Ok(format!("{crops} crops with 12 positives / 0 negatives; anchor matching gave {ablation_negatives} negatives"))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * (1.0 + b.abs())
}

fn c3_loss_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let batches = 1200;
    for i in 0..batches {
        let b = random_batch(&mut rng);
        let r = reg(&b.reg_pred, &b.reg_target);
        let rr = reg(&b.roi_pred, &b.roi_target);
        let rpn = rpn_loss_mpsr(&bin(&b.main), &r, &bin(&b.refine)).map_err(|e| e.to_string())?;
        ensure(close(rpn.total(), oracle_rpn(&b.main, &b.reg_pred, &b.reg_target, &b.refine)), format!("batch {i}: rpn"))?;
        let base = rpn_loss_baseline(&bin(&b.main), &r).map_err(|e| e.to_string())?;
        ensure(close(base.total(), oracle_rpn(&b.main, &b.reg_pred, &b.reg_target, &[])), format!("batch {i}: rpn baseline"))?;
        let roi_b = roi_loss_baseline(&cls(&b.roi_main), &rr).map_err(|e| e.to_string())?;
        ensure(close(roi_b.total(), oracle_roi(&b.roi_main, &b.roi_pred, &b.roi_target, &[], 0.0)), format!("batch {i}: roi baseline"))?;
        ensure(rpn_loss_mpsr(&bin(&b.main), &r, &[]).map_err(|e| e.to_string())? == base, "M_obj = 0 reduction")?;
        ensure(rpn.d_reg == base.d_reg, format!("batch {i}: refinement changed regression gradient"))?;
        if !b.roi_refine.is_empty() {
            let roi = roi_loss_mpsr(&cls(&b.roi_main), &rr, &cls(&b.roi_refine), b.lambda).map_err(|e| e.to_string())?;
            let want = oracle_roi(&b.roi_main, &b.roi_pred, &b.roi_target, &b.roi_refine, b.lambda);
            ensure(close(roi.total(), want), format!("batch {i}: roi mpsr"))?;
            ensure(roi.d_reg == roi_b.d_reg, format!("batch {i}: refinement changed roi regression gradient"))?;
            let zero = roi_loss_mpsr(&cls(&b.roi_main), &rr, &cls(&b.roi_refine), 0.0).map_err(|e| e.to_string())?;
            ensure(zero.total() == roi_b.total(), "lambda = 0 reduction")?;
        }
    }
    // End to end: the refinement samples leave the regression layers alone.
    let (det, plan) = common::grad::plan_for(Mode::Mpsr, 31);
    let (_, with) = loss_and_grad(&det, &plan).map_err(|e| e.to_string())?;
    let main_only = StepPlan {
        refine_rpn: false,
        refine_roi: false,
        ..plan
    };
    let (_, without) = loss_and_grad(&det, &main_only).map_err(|e| e.to_string())?;
    for name in ["rpn.reg.weight", "rpn.reg.bias", "roi.reg.weight", "roi.reg.bias"] {
        ensure(with.by_name(name) == without.by_name(name), format!("{name} gradient changed by refinement"))?;
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!("{batches} batches within 1e-6; reductions exact; regression gradients untouched"))
}

fn c4_gradcheck() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    for (mode, seed) in [(Mode::BaselineFpn, 41), (Mode::Mpsr, 42)] {
        let (det, plan) = common::grad::plan_for(mode, seed);
        ensure((mode == Mode::Mpsr) == (plan.refinement_rpn_samples() > 0), "refinement presence")?;
        let (worst, kinks) = common::grad::check(det, &plan, 60, seed);
        notes.push(format!("{mode:?}: 60 params, worst rel err {worst:.1e}, {kinks} kinks skipped"));
    }
    within(start, Duration::from_secs(300))?;
    Ok(notes.join("; "))
}

fn bits(dets: &[Detection]) -> Vec<(usize, [u64; 4], u64)> {
    dets.iter()
        .map(|d| (d.class_id, d.bbox.to_array().map(f64::to_bits), d.score.to_bits()))
        .collect()
}

fn c5_inference_parity() -> Outcome {
    let start = Instant::now();
    let data = shapes(51, 6);
    let det = Detector::new(tiny_config(3), 5).map_err(|e| e.to_string())?;
    let mut t = Trainer::new(tiny_train(Mode::Mpsr), Stage::Base, det, data.clone()).map_err(|e| e.to_string())?;
    t.run().map_err(|e| e.to_string())?;
    ensure(t.pyramids_built > 0, "no pyramids built")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    t.checkpoint().save(dir.path()).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(dir.path()).map_err(|e| e.to_string())?;
    let plain = Detector::from_params(loaded.detector.config.clone(), loaded.detector.params.clone()).map_err(|e| e.to_string())?;
    let plan = t.plan_step().map_err(|e| e.to_string())?;
    let mut n = 0;
    for rec in &data.images {
        let px = data.load_pixels(rec).map_err(|e| e.to_string())?;
        let a = bits(&t.detector.predict(&px).map_err(|e| e.to_string())?);
        let b = bits(&plain.predict(&px).map_err(|e| e.to_string())?);
        ensure(a == b, format!("image {} differs", rec.id))?;
        n += a.len();
    }
    loss_and_grad(&plain, &plan).map_err(|e| e.to_string())?;
    for rec in &data.images {
        let px = data.load_pixels(rec).map_err(|e| e.to_string())?;
        ensure(
            bits(&t.detector.predict(&px).unwrap()) == bits(&plain.predict(&px).unwrap()),
            "refinement pass changed inference",
        )?;
    }
    ensure(n > 0, "no detections to compare")?;
    within(start, Duration::from_secs(60))?;
    Ok(format!("{n} detections bit-identical across {} images", data.images.len()))
}

fn c6_protocol() -> Outcome {
    let start = Instant::now();
    let data = shapes(61, 12);
    for seed in 0..20 {
        for k in [1, 2, 3, 5, 10] {
            let cfg = KShotConfig::new(k, seed, 0..3);
            let a = build_kshot_subset(&data, &cfg).map_err(|e| e.to_string())?;
            ensure(a.instances_per_class() == vec![k; 3], format!("k={k}: {:?}", a.instances_per_class()))?;
            ensure(a == build_kshot_subset(&data, &cfg).map_err(|e| e.to_string())?, "not deterministic")?;
        }
    }
    let split = ClassSplit::new([0, 1], [2], 3).map_err(|e| e.to_string())?;
    let base = train_base(&data, &split, tiny_config(3), &tiny_train(Mode::BaselineFpn), None).map_err(|e| e.to_string())?;
    let fewshot = build_kshot_subset(&data, &KShotConfig::new(3, 0, 0..3)).map_err(|e| e.to_string())?;
    let mut t = finetune_trainer(&base, &fewshot, &tiny_train(Mode::Mpsr)).map_err(|e| e.to_string())?;
    let mut kept = 0;
    for (name, tensor) in t.detector.params.iter() {
        let old = base.detector.params.by_name(name).ok_or(format!("{name} missing"))?;
        if name.starts_with(Detector::<f32>::CLASSIFIER) {
            ensure(tensor.data != old.data, format!("{name} not replaced"))?;
        } else {
            ensure(tensor == old, format!("{name} not loaded"))?;
            kept += 1;
        }
    }
    t.step().map_err(|e| e.to_string())?;
    t.step().map_err(|e| e.to_string())?;
    let frozen: Vec<&str> = t
        .detector
        .params
        .iter()
        .filter(|(name, tensor)| base.detector.params.by_name(name).is_some_and(|old| old.data == tensor.data))
        .map(|(name, _)| name)
        .collect();
    ensure(frozen.is_empty(), format!("frozen: {frozen:?}"))?;
    within(start, Duration::from_secs(60))?;
    Ok(format!("k-shot exact and deterministic over 100 draws; {kept} tensors loaded, classifier replaced, none frozen"))
}

fn c7_trend() -> Outcome {
    let start = Instant::now();
    let cfg = TrendConfig::desk();
    let mut mpsr_wins = 0;
    let mut limited_below = 0;
    let seeds = 0..5u64;
    for seed in seeds.clone() {
        let r = run_seed(&cfg, seed).map_err(|e| format!("seed {seed}: {e}"))?;
        let (b, m, rnd) = (r.baseline_limited.novel_map(), r.mpsr_limited.novel_map(), r.baseline_random.novel_map());
        mpsr_wins += (m >= b) as usize;
        limited_below += (b < rnd) as usize;
        println!(
            "    seed {seed}: novel mAP baseline-FPN/limited {b:.4}  MPSR/limited {m:.4}  baseline-FPN/random {rnd:.4}  ({:.0}s)",
            r.base_seconds + r.baseline_limited.seconds + r.mpsr_limited.seconds + r.baseline_random.seconds
        );
    }
    let n = seeds.count();
    let summary = format!(
        "MPSR >= baseline in {mpsr_wins}/{n} seeds; limited < random in {limited_below}/{n} seeds; {:.1} min",
        start.elapsed().as_secs_f64() / 60.0
    );
    ensure(mpsr_wins >= 4 && limited_below >= 4, summary.clone())?;
    within(start, Duration::from_secs(30 * 60)).map_err(|e| format!("{summary}; {e}"))?;
    Ok(summary)
}

fn c8_ap() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut defined = 0;
    for case in 0..1000 {
        let nimg = rng.random_range(1..4);
        let gts: Vec<Vec<BBox>> = (0..nimg)
            .map(|_| {
                (0..rng.random_range(0..4))
                    .map(|_| {
                        let (x, y) = (rng.random_range(0.0..80.0), rng.random_range(0.0..80.0));
                        BBox::raw(x, y, x + rng.random_range(5.0..30.0), y + rng.random_range(5.0..30.0))
                    })
                    .collect()
            })
            .collect();
        let mut dets = Vec::new();
        for _ in 0..rng.random_range(0..10) {
            let image = rng.random_range(0..nimg);
            let bbox = if !gts[image].is_empty() && rng.random_bool(0.7) {
                let g = gts[image][rng.random_range(0..gts[image].len())];
                let mut d = || rng.random_range(-6.0..6.0);
                BBox::raw(g.x1 + d(), g.y1 + d(), g.x2 + d(), g.y2 + d())
            } else {
                let (x, y) = (rng.random_range(0.0..90.0), rng.random_range(0.0..90.0));
                BBox::raw(x, y, x + 10.0, y + 10.0)
            };
            let score = rng.random_range(0..6) as f64 / 5.0;
            dets.push(ScoredBox { image, bbox, score });
        }
        let tuples: Vec<(usize, BBox, f64)> = dets.iter().map(|d| (d.image, d.bbox, d.score)).collect();
        match (voc_ap(&dets, &gts, 0.5), oracle_ap(&tuples, &gts, 0.5)) {
            (Some(a), Some(b)) => {
                ensure((a - b).abs() <= 1e-9, format!("case {case}: {a} vs {b}"))?;
                defined += 1;
            }
            (None, None) => {}
            other => return Err(format!("case {case}: {other:?}")),
        }
    }
    let g = BBox::raw(0.0, 0.0, 10.0, 10.0);
    let hand = [
        ScoredBox { image: 0, bbox: BBox::raw(40.0, 40.0, 50.0, 50.0), score: 0.9 },
        ScoredBox { image: 0, bbox: g, score: 0.8 },
    ];
    let ap = voc_ap(&hand, &[vec![g]], 0.5);
    ensure(ap == Some(0.5), format!("hand-built fixture gave {ap:?}"))?;
    within(start, Duration::from_secs(60))?;
    Ok(format!("1000 fixtures ({defined} with defined AP) within 1e-9; hand-built AP = 0.5"))
}

fn c9_improper_negatives() -> Outcome {
    let start = Instant::now();
    let det = DetectorConfig::paper(1);
    let fixtures = [
        vec![BBox::raw(60.0, 40.0, 420.0, 340.0)],
        vec![BBox::raw(30.0, 30.0, 230.0, 330.0), BBox::raw(300.0, 200.0, 340.0, 250.0)],
        vec![BBox::raw(100.0, 100.0, 140.0, 130.0), BBox::raw(200.0, 50.0, 480.0, 360.0)],
    ];
    let mut last = Vec::new();
    for gts in &fixtures {
        let per = improper_negatives_per_scale(500, 375, gts, &PAPER_MULTISCALE_SIDES, 1333.0 / 800.0, &det);
        let cumulative: Vec<usize> = per
            .iter()
            .scan(0, |acc, &n| {
                *acc += n;
                Some(*acc)
            })
            .collect();
        ensure(cumulative.windows(2).all(|w| w[0] <= w[1]), format!("cumulative {cumulative:?}"))?;
        ensure(per.windows(2).all(|w| w[0] <= w[1]), format!("per scale {per:?}"))?;
        last = cumulative;
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!("non-decreasing on {} fixtures, e.g. cumulative {last:?}", fixtures.len()))
}

struct Ablation {
    label: &'static str,
    refine_rpn: bool,
    refine_roi: bool,
    stage: RefineStage,
}

fn read_log(path: &Path) -> Result<(serde_json::Value, Vec<LogRecord>), String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header = serde_json::from_str(lines.next().ok_or("empty log")?).map_err(|e| e.to_string())?;
    let records = lines.map(|l| serde_json::from_str(l).map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    Ok((header, records))
}

fn c10_ablations() -> Outcome {
    let start = Instant::now();
    let mut cfg = TrendConfig::desk();
    // Shortened schedules: every switch runs the full pipeline, but base
    // training with refinement at full length would dominate the gate.
    cfg.train.base_schedule = vec![(150, 0.01)];
    cfg.train.finetune_schedule = vec![(40, 0.01)];
    cfg.train.warmup_iters = 20;
    let seed = 0;
    let data = build_data(&cfg, seed).map_err(|e| e.to_string())?;
    let fewshot = fewshot_set(&cfg, &data, ShotRegime::Limited, seed).map_err(|e| e.to_string())?;
    let arms = [
        Ablation { label: "rpn-only", refine_rpn: true, refine_roi: false, stage: RefineStage::FewshotOnly },
        Ablation { label: "roi-only", refine_rpn: false, refine_roi: true, stage: RefineStage::FewshotOnly },
        Ablation { label: "base-only", refine_rpn: true, refine_roi: true, stage: RefineStage::BaseOnly },
        Ablation { label: "fewshot-only", refine_rpn: true, refine_roi: true, stage: RefineStage::FewshotOnly },
    ];
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut headers = BTreeSet::new();
    let mut notes = Vec::new();
    for arm in &arms {
        let train = TrainConfig {
            refine_rpn: arm.refine_rpn,
            refine_roi: arm.refine_roi,
            refine_stage: arm.stage,
            ..mpsr_config(&cfg, seed)
        };
        let base_log = dir.path().join(format!("{}-base.jsonl", arm.label));
        let ft_log = dir.path().join(format!("{}-fewshot.jsonl", arm.label));
        let base = train_base(&data.pool, &data.split, cfg.detector.clone(), &train, Some(&base_log))
            .map_err(|e| format!("{}: {e}", arm.label))?;
        let tuned = finetune(&base, &fewshot, &train, Some(&ft_log)).map_err(|e| format!("{}: {e}", arm.label))?;
        let report = evaluate(&tuned.detector, &data.test, &data.split).map_err(|e| e.to_string())?;
        for (stage, path) in [(Stage::Base, &base_log), (Stage::Fewshot, &ft_log)] {
            let (header, records) = read_log(path)?;
            let active = train.refinement_active(stage);
            ensure(header["refinement_active"] == active, format!("{}: header refinement flag", arm.label))?;
            ensure(records.len() == schedule_len(train.schedule(stage)), format!("{}: {stage:?} incomplete", arm.label))?;
            for r in &records {
                let l = &r.loss;
                ensure((l.m_obj > 0) == (active && arm.refine_rpn), format!("{} {stage:?} it {}: M_obj {}", arm.label, r.iteration, l.m_obj))?;
                ensure((l.m_roi > 0) == (active && arm.refine_roi), format!("{} {stage:?} it {}: M_RoI {}", arm.label, r.iteration, l.m_roi))?;
                ensure(active || (l.refine_rpn_bcls == 0.0 && l.refine_roi_kcls == 0.0), "inactive refinement has loss")?;
            }
            headers.insert(header["config"].to_string() + &header["stage"].to_string());
        }
        notes.push(format!("{} novel {:.3}", arm.label, report.novel_map.unwrap_or(0.0)));
    }
    ensure(headers.len() == 2 * arms.len(), "configurations not distinguishable in logs")?;
    Ok(format!("{} ({:.0}s)", notes.join(", "), start.elapsed().as_secs_f64()))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "level table", c1_level_table),
        (2, "selection rule", c2_selection_rule),
        (3, "loss oracles", c3_loss_oracles),
        (4, "gradient check", c4_gradcheck),
        (5, "inference parity", c5_inference_parity),
        (6, "protocol", c6_protocol),
        (7, "trend reproduction", c7_trend),
        (8, "AP evaluator", c8_ap),
        (9, "improper negatives", c9_improper_negatives),
        (10, "ablation switches", c10_ablations),
    ];
    let only: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
