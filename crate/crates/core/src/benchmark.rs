//! Synthetic few-shot benchmark: base classes with plentiful instances at
//! all scales, novel classes whose k shots are either drawn at random or
//! confined to one scale bin, evaluated on novel objects at every scale.

use std::collections::BTreeSet;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datamodel::{ClassSplit, Dataset};
use crate::detector::DetectorConfig;
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::fewshot::{build_kshot_subset, build_limited_scale_subset, KShotConfig, ScaleRange};
use crate::raster::ResizePolicy;
use crate::synthetic::{generate, ClassSpec, Shape, SyntheticSpec};
use crate::trainer::{finetune_trainer, train_base, Mode, RefineStage, Stage, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendConfig {
    pub image_size: u32,
    pub base_shapes: Vec<Shape>,
    pub novel_shapes: Vec<Shape>,
    pub base_instances: usize,
    /// Novel instances in the pool the k shots are drawn from.
    pub novel_pool_instances: usize,
    pub test_instances: usize,
    /// Object scales present in every split, equally weighted.
    pub scales: Vec<f64>,
    pub scale_jitter: f64,
    pub limited: ScaleRange,
    pub k: usize,
    pub max_objects_per_image: usize,
    pub noise: f64,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
}

impl TrendConfig {
    pub fn desk() -> Self {
        let base_shapes = vec![Shape::Disk, Shape::Square, Shape::Triangle];
        let novel_shapes = vec![Shape::Ring, Shape::Cross];
        let num_classes = base_shapes.len() + novel_shapes.len();
        let mut train = TrainConfig::desk(Mode::BaselineFpn);
        train.base_schedule = vec![(1500, 0.005), (300, 0.0005)];
        train.finetune_schedule = vec![(240, 0.01), (60, 0.001)];
        train.batch_size = 2;
        Self {
            image_size: 128,
            base_shapes,
            novel_shapes,
            base_instances: 200,
            novel_pool_instances: 60,
            test_instances: 40,
            scales: vec![16.0, 24.0, 32.0, 48.0, 64.0, 96.0],
            scale_jitter: 0.15,
            limited: ScaleRange { lo: 20.0, hi: 28.0 },
            k: 5,
            max_objects_per_image: 3,
            noise: 0.04,
            detector: DetectorConfig {
                resize: ResizePolicy::new(128.0, 213.0),
                ..DetectorConfig::desk(num_classes)
            },
            train,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.base_shapes.len() + self.novel_shapes.len()
    }

    pub fn split(&self) -> ClassSplit {
        let nb = self.base_shapes.len();
        ClassSplit::new(0..nb, nb..self.num_classes(), self.num_classes()).expect("disjoint cover")
    }

    /// Training pool: base classes at full count plus the novel pool.
    pub fn pool_spec(&self, seed: u64) -> SyntheticSpec {
        self.spec(seed.wrapping_mul(2).wrapping_add(1000), self.base_instances, self.novel_pool_instances)
    }

    pub fn test_spec(&self, seed: u64) -> SyntheticSpec {
        self.spec(seed.wrapping_mul(2).wrapping_add(1001), self.test_instances, self.test_instances)
    }

    fn spec(&self, seed: u64, base: usize, novel: usize) -> SyntheticSpec {
        let scales: Vec<(f64, f64)> = self.scales.iter().map(|&s| (s, 1.0)).collect();
        let class = |shape: Shape, instances: usize| ClassSpec {
            name: shape.name().into(),
            shape,
            instances,
            scales: scales.clone(),
        };
        SyntheticSpec {
            classes: self
                .base_shapes
                .iter()
                .map(|&s| class(s, base))
                .chain(self.novel_shapes.iter().map(|&s| class(s, novel)))
                .collect(),
            image_width: self.image_size,
            image_height: self.image_size,
            max_objects_per_image: self.max_objects_per_image,
            scale_jitter: self.scale_jitter,
            noise: self.noise,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrendData {
    /// Base classes at full count plus the novel pool.
    pub pool: Dataset,
    pub test: Dataset,
    pub split: ClassSplit,
}

pub fn build_data(cfg: &TrendConfig, seed: u64) -> Result<TrendData> {
    let pool = generate(&cfg.pool_spec(seed))?;
    let test = generate(&cfg.test_spec(seed))?;
    Ok(TrendData {
        pool,
        test,
        split: cfg.split(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotRegime {
    /// k shots per class with scales confined to the limited bin.
    Limited,
    /// k shots per class drawn uniformly.
    Random,
}

/// The k-shot fine-tuning set over all classes.
pub fn fewshot_set(cfg: &TrendConfig, data: &TrendData, regime: ShotRegime, seed: u64) -> Result<Dataset> {
    let all: BTreeSet<usize> = (0..cfg.num_classes()).collect();
    let kcfg = KShotConfig {
        k: cfg.k,
        seed,
        classes: all,
    };
    match regime {
        ShotRegime::Random => build_kshot_subset(&data.pool, &kcfg),
        ShotRegime::Limited => build_limited_scale_subset(&data.pool, &kcfg, &cfg.limited, &cfg.detector.resize),
    }
}

pub fn base_training(cfg: &TrendConfig, data: &TrendData, train: &TrainConfig) -> Result<Checkpoint> {
    train_base(&data.pool, &data.split, cfg.detector.clone(), train, None)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmResult {
    pub label: String,
    pub regime: ShotRegime,
    pub mode: Mode,
    pub refine_rpn: bool,
    pub refine_roi: bool,
    pub refine_stage: RefineStage,
    pub refinement_active: bool,
    pub pyramids_built: usize,
    pub max_m_obj: usize,
    pub max_m_roi: usize,
    pub iterations: usize,
    pub final_loss: f64,
    pub seconds: f64,
    pub report: EvalReport,
}

impl ArmResult {
    pub fn novel_map(&self) -> f64 {
        self.report.novel_map.unwrap_or(0.0)
    }
}

/// Fine-tunes `base` on the regime's k-shot set and evaluates on the test
/// split.
pub fn run_arm(
    label: &str,
    data: &TrendData,
    base: &Checkpoint,
    fewshot: &Dataset,
    regime: ShotRegime,
    train: &TrainConfig,
) -> Result<ArmResult> {
    let start = Instant::now();
    let mut t: Trainer = finetune_trainer(base, fewshot, train)?;
    t.run()?;
    let report = evaluate(&t.detector, &data.test, &data.split)?;
    let seconds = start.elapsed().as_secs_f64();
    info!(
        "{label}: novel mAP {:.4} base mAP {:.4} ({seconds:.1}s)",
        report.novel_map.unwrap_or(0.0),
        report.base_map.unwrap_or(0.0)
    );
    Ok(ArmResult {
        label: label.into(),
        regime,
        mode: train.mode,
        refine_rpn: train.refine_rpn,
        refine_roi: train.refine_roi,
        refine_stage: train.refine_stage,
        refinement_active: t.config.refinement_active(Stage::Fewshot),
        pyramids_built: t.pyramids_built,
        max_m_obj: t.history.iter().map(|l| l.m_obj).max().unwrap_or(0),
        max_m_roi: t.history.iter().map(|l| l.m_roi).max().unwrap_or(0),
        iterations: t.iteration,
        final_loss: t.history.last().map(|l| l.total).unwrap_or(f64::NAN),
        seconds,
        report,
    })
}

/// Fine-tuning configuration for the refinement arm of the benchmark.
pub fn mpsr_config(cfg: &TrendConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        mode: Mode::Mpsr,
        refine_rpn: true,
        refine_roi: true,
        refine_stage: RefineStage::FewshotOnly,
        seed,
        ..cfg.train.clone()
    }
}

pub fn baseline_config(cfg: &TrendConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        mode: Mode::BaselineFpn,
        refine_rpn: false,
        refine_roi: false,
        seed,
        ..cfg.train.clone()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub baseline_limited: ArmResult,
    pub mpsr_limited: ArmResult,
    pub baseline_random: ArmResult,
    pub base_seconds: f64,
}

/// One seed of the trend experiment: shared base training, then the
/// three fine-tuning arms.
pub fn run_seed(cfg: &TrendConfig, seed: u64) -> Result<SeedResult> {
    let data = build_data(cfg, seed)?;
    let start = Instant::now();
    let base = base_training(cfg, &data, &baseline_config(cfg, seed))?;
    let base_seconds = start.elapsed().as_secs_f64();
    info!("seed {seed}: base training {base_seconds:.1}s");
    let limited = fewshot_set(cfg, &data, ShotRegime::Limited, seed)?;
    let random = fewshot_set(cfg, &data, ShotRegime::Random, seed)?;
    let baseline_limited = run_arm(
        "baseline_fpn/limited",
        &data,
        &base,
        &limited,
        ShotRegime::Limited,
        &baseline_config(cfg, seed),
    )?;
    let mpsr_limited = run_arm("mpsr/limited", &data, &base, &limited, ShotRegime::Limited, &mpsr_config(cfg, seed))?;
    let baseline_random = run_arm(
        "baseline_fpn/random",
        &data,
        &base,
        &random,
        ShotRegime::Random,
        &baseline_config(cfg, seed),
    )?;
    Ok(SeedResult {
        seed,
        baseline_limited,
        mpsr_limited,
        baseline_random,
        base_seconds,
    })
}
