mod chart;
mod config;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;
use sha2::{Digest, Sha256};

use mpsr::checkpoint::{Checkpoint, MANIFEST_FILE};
use mpsr::datamodel::{load_dataset, save_dataset, ClassSplit, Dataset, ANNOTATIONS_FILE};
use mpsr::eval::evaluate;
use mpsr::fewshot::{
    build_kshot_subset, build_limited_scale_subset, default_scale_edges, scale_histogram, KShotConfig, ScaleRange,
};
use mpsr::raster::ResizePolicy;
use mpsr::synthetic::generate;
use mpsr::trainer::{finetune, train_base, Mode, Multiscale, PyramidSelection, RefineStage, TrainConfig};

use config::Experiment;

/// Error caused by how the command was invoked; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "mpsr", version, about = "Few-shot object detection with multi-scale positive sample refinement")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes dataset.
    Generate(GenerateArgs),
    /// Draw a k-shot subset, optionally restricted to a scale range.
    Prepare(PrepareArgs),
    /// Train on the base classes of a dataset.
    TrainBase(TrainBaseArgs),
    /// Fine-tune a base checkpoint on a k-shot set.
    Finetune(FinetuneArgs),
    /// Score a checkpoint with AP at IoU 0.5.
    Eval(EvalArgs),
    /// Histogram of object scales after resizing.
    AnalyzeScales(AnalyzeArgs),
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    common: Common,
    /// Source dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lower bound of the object scale range, in resized pixels.
    #[arg(long)]
    scale_lo: Option<f64>,
    /// Upper bound (exclusive) of the object scale range.
    #[arg(long)]
    scale_hi: Option<f64>,
    /// Classes to sample; all classes when omitted.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<usize>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    #[value(name = "baseline_fpn")]
    BaselineFpn,
    Mpsr,
}

#[derive(Clone, Copy, ValueEnum)]
enum RefineArg {
    Rpn,
    Roi,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum RefineStageArg {
    Base,
    Fewshot,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Manual,
    #[value(name = "anchor_match")]
    AnchorMatch,
}

#[derive(Clone, Copy, ValueEnum)]
enum MultiscaleArg {
    None,
    #[value(name = "scale_aug")]
    ScaleAug,
    #[value(name = "image_pyramids")]
    ImagePyramids,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Which heads receive refinement samples (mpsr mode).
    #[arg(long, value_enum)]
    refine: Option<RefineArg>,
    /// Training stages that run the refinement branch (mpsr mode).
    #[arg(long, value_enum)]
    refine_stage: Option<RefineStageArg>,
    #[arg(long, value_enum)]
    pyramid_selection: Option<SelectionArg>,
    #[arg(long, value_enum)]
    multiscale: Option<MultiscaleArg>,
    /// Novel class ids; overrides `novel_classes` in the config.
    #[arg(long, value_delimiter = ',')]
    novel: Option<Vec<usize>>,
}

#[derive(Args)]
struct TrainBaseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Base checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// k-shot dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',')]
    novel: Option<Vec<usize>>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: PathBuf,
    /// Shorter side the images are resized to; the config's when omitted.
    #[arg(long)]
    shorter: Option<f64>,
    #[arg(long, default_value_t = 32.0)]
    bin_width: f64,
    /// Scale where the last bounded bin ends.
    #[arg(long, default_value_t = 512.0)]
    max_scale: f64,
    /// Also render scale_histogram.svg.
    #[arg(long)]
    chart: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => cmd_generate(a),
        Command::Prepare(a) => cmd_prepare(a),
        Command::TrainBase(a) => cmd_train_base(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::AnalyzeScales(a) => cmd_analyze(a),
    }
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join(ANNOTATIONS_FILE).is_file() {
        return Err(usage(format!(
            "{} has no {ANNOTATIONS_FILE}; create a dataset with `mpsr generate --out {}`",
            dir.display(),
            dir.display()
        )));
    }
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn open_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(usage(format!(
            "{} is not a checkpoint directory; produce one with `mpsr train-base`",
            dir.display()
        )));
    }
    Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn snapshot(out: &Path, exp: &Experiment, extra: serde_json::Value) -> Result<()> {
    write_json(&out.join("config.json"), &json!({ "experiment": exp, "invocation": extra }))
}

fn apply_flags(train: &mut TrainConfig, f: &TrainFlags) -> Result<()> {
    if let Some(s) = f.seed {
        train.seed = s;
    }
    if let Some(m) = f.mode {
        train.mode = match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::BaselineFpn => Mode::BaselineFpn,
            ModeArg::Mpsr => Mode::Mpsr,
        };
        let on = train.mode == Mode::Mpsr;
        train.refine_rpn = on;
        train.refine_roi = on;
    }
    let needs_mpsr = |flag: &str| {
        if train.mode == Mode::Mpsr {
            Ok(())
        } else {
            Err(usage(format!("{flag} only applies with --mode mpsr")))
        }
    };
    if let Some(r) = f.refine {
        needs_mpsr("--refine")?;
        train.refine_rpn = matches!(r, RefineArg::Rpn | RefineArg::Both);
        train.refine_roi = matches!(r, RefineArg::Roi | RefineArg::Both);
    }
    if let Some(s) = f.refine_stage {
        needs_mpsr("--refine-stage")?;
        train.refine_stage = match s {
            RefineStageArg::Base => RefineStage::BaseOnly,
            RefineStageArg::Fewshot => RefineStage::FewshotOnly,
            RefineStageArg::Both => RefineStage::Both,
        };
    }
    if let Some(p) = f.pyramid_selection {
        needs_mpsr("--pyramid-selection")?;
        train.pyramid_selection = match p {
            SelectionArg::Manual => PyramidSelection::Manual,
            SelectionArg::AnchorMatch => PyramidSelection::AnchorMatch,
        };
    }
    if let Some(m) = f.multiscale {
        train.multiscale = match m {
            MultiscaleArg::None => Multiscale::None,
            MultiscaleArg::ScaleAug => Multiscale::ScaleAug,
            MultiscaleArg::ImagePyramids => Multiscale::ImagePyramids,
        };
    }
    train.validate().map_err(|e| usage(e.to_string()))
}

fn class_split(novel: &[usize], num_classes: usize) -> Result<ClassSplit> {
    if let Some(&c) = novel.iter().find(|&&c| c >= num_classes) {
        return Err(usage(format!("novel class {c} does not exist (dataset has {num_classes} classes)")));
    }
    let novel: BTreeSet<usize> = novel.iter().copied().collect();
    let base: Vec<usize> = (0..num_classes).filter(|c| !novel.contains(c)).collect();
    Ok(ClassSplit::new(base, novel, num_classes)?)
}

/// Digest of the annotation file and every image file of `dir`.
fn dataset_hash(dir: &Path, ds: &Dataset) -> Result<String> {
    let mut h = Sha256::new();
    let ann = dir.join(ANNOTATIONS_FILE);
    h.update(fs::read(&ann).with_context(|| format!("reading {}", ann.display()))?);
    for img in &ds.images {
        let p = dir.join(&img.file);
        h.update(fs::read(&p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut exp = Experiment::load(a.common.config.as_deref())?;
    if let Some(s) = a.seed {
        exp.synthetic.seed = s;
    }
    exp.synthetic.validate().map_err(|e| usage(e.to_string()))?;
    let ds = generate(&exp.synthetic)?;
    create_out(&a.common.out)?;
    save_dataset(&ds, &a.common.out)?;
    snapshot(&a.common.out, &exp, json!({ "command": "generate" }))?;
    info!(
        "wrote {} images with {} instances to {}",
        ds.images.len(),
        ds.num_instances(),
        a.common.out.display()
    );
    Ok(())
}

fn cmd_prepare(a: PrepareArgs) -> Result<()> {
    let exp = Experiment::load(a.common.config.as_deref())?;
    let ds = open_dataset(&a.dataset)?;
    let classes = a.classes.clone().unwrap_or_else(|| (0..ds.num_classes()).collect());
    if let Some(&c) = classes.iter().find(|&&c| c >= ds.num_classes()) {
        return Err(usage(format!("class {c} does not exist (dataset has {} classes)", ds.num_classes())));
    }
    let cfg = KShotConfig::new(a.k, a.seed, classes);
    let range = match (a.scale_lo, a.scale_hi) {
        (None, None) => None,
        (lo, hi) => Some(
            ScaleRange::new(lo.unwrap_or(0.0), hi.unwrap_or(f64::INFINITY)).map_err(|e| usage(e.to_string()))?,
        ),
    };
    let subset = match &range {
        None => build_kshot_subset(&ds, &cfg)?,
        Some(r) => build_limited_scale_subset(&ds, &cfg, r, &exp.detector.resize)?,
    };
    create_out(&a.common.out)?;
    save_dataset(&subset, &a.common.out)?;
    let provenance = json!({
        "source": a.dataset.display().to_string(),
        "source_sha256": dataset_hash(&a.dataset, &ds)?,
        "seed": a.seed,
        "k": a.k,
        "classes": cfg.classes,
        "scale_range": range.map(|r| json!({ "lo": r.lo, "hi": if r.hi.is_finite() { json!(r.hi) } else { json!(null) } })),
        "resize": exp.detector.resize,
        "instances_per_class": subset.instances_per_class(),
    });
    write_json(&a.common.out.join("provenance.json"), &provenance)?;
    snapshot(&a.common.out, &exp, json!({ "command": "prepare" }))?;
    info!(
        "wrote {} images with {} instances to {}",
        subset.images.len(),
        subset.num_instances(),
        a.common.out.display()
    );
    Ok(())
}

fn train_log(out: &Path) -> Result<PathBuf> {
    let log = out.join("train_log.jsonl");
    if log.exists() {
        fs::remove_file(&log).with_context(|| format!("removing stale {}", log.display()))?;
    }
    Ok(log)
}

fn cmd_train_base(a: TrainBaseArgs) -> Result<()> {
    let mut exp = Experiment::load(a.common.config.as_deref())?;
    apply_flags(&mut exp.train, &a.flags)?;
    if let Some(n) = &a.flags.novel {
        exp.novel_classes = n.clone();
    }
    let ds = open_dataset(&a.dataset)?;
    let split = class_split(&exp.novel_classes, ds.num_classes())?;
    exp.detector.num_classes = ds.num_classes();
    create_out(&a.common.out)?;
    snapshot(&a.common.out, &exp, json!({ "command": "train-base", "dataset": a.dataset }))?;
    let log = train_log(&a.common.out)?;
    let ckpt = train_base(&ds, &split, exp.detector.clone(), &exp.train, Some(&log))?;
    let dir = a.common.out.join("checkpoint");
    ckpt.save(&dir)?;
    info!("saved base checkpoint to {}", dir.display());
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let mut exp = Experiment::load(a.common.config.as_deref())?;
    apply_flags(&mut exp.train, &a.flags)?;
    if let Some(n) = &a.flags.novel {
        exp.novel_classes = n.clone();
    }
    let base = open_checkpoint(&a.checkpoint)?;
    let ds = open_dataset(&a.dataset)?;
    if base.class_names != ds.classes {
        return Err(usage(format!(
            "checkpoint classes {:?} differ from dataset classes {:?}",
            base.class_names, ds.classes
        )));
    }
    exp.detector = base.detector.config.clone();
    create_out(&a.common.out)?;
    snapshot(
        &a.common.out,
        &exp,
        json!({ "command": "finetune", "dataset": a.dataset, "checkpoint": a.checkpoint }),
    )?;
    let log = train_log(&a.common.out)?;
    let ckpt = finetune(&base, &ds, &exp.train, Some(&log))?;
    let dir = a.common.out.join("checkpoint");
    ckpt.save(&dir)?;
    info!("saved fine-tuned checkpoint to {}", dir.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut exp = Experiment::load(a.common.config.as_deref())?;
    if let Some(n) = &a.novel {
        exp.novel_classes = n.clone();
    }
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let ds = open_dataset(&a.dataset)?;
    if ckpt.detector.config.num_classes != ds.num_classes() {
        return Err(usage(format!(
            "checkpoint predicts {} classes but the dataset has {}",
            ckpt.detector.config.num_classes,
            ds.num_classes()
        )));
    }
    let split = class_split(&exp.novel_classes, ds.num_classes())?;
    let report = evaluate(&ckpt.detector, &ds, &split)?;
    create_out(&a.common.out)?;
    fs::write(a.common.out.join("report.json"), report.to_json() + "\n")?;
    fs::write(a.common.out.join("report.csv"), report.to_csv())?;
    exp.detector = ckpt.detector.config.clone();
    snapshot(
        &a.common.out,
        &exp,
        json!({ "command": "eval", "dataset": a.dataset, "checkpoint": a.checkpoint }),
    )?;
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
    info!("novel mAP {} base mAP {}", fmt(report.novel_map), fmt(report.base_map));
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let mut exp = Experiment::load(a.common.config.as_deref())?;
    if let Some(s) = a.shorter {
        let ratio = exp.detector.resize.max_longer / exp.detector.resize.shorter;
        exp.detector.resize = ResizePolicy::new(s, s * ratio);
    }
    if !(a.bin_width > 0.0) || !(a.max_scale > 0.0) {
        return Err(usage("--bin-width and --max-scale must be positive"));
    }
    let ds = open_dataset(&a.dataset)?;
    let h = scale_histogram(&ds, &default_scale_edges(a.bin_width, a.max_scale), exp.detector.resize)?;
    create_out(&a.common.out)?;
    fs::write(a.common.out.join("scale_histogram.csv"), h.to_csv())?;
    if a.chart {
        fs::write(a.common.out.join("scale_histogram.svg"), chart::histogram_svg(&h))?;
    }
    snapshot(&a.common.out, &exp, json!({ "command": "analyze-scales", "dataset": a.dataset }))?;
    info!("{} instances binned, {} out of range", h.total(), h.out_of_range);
    Ok(())
}
