//! Command-line front end: `synth`, `train-base`, `increment`, `evaluate`
//! and `experiment`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::datamodel::{
    build_task_schedule, generate_splits, load_dataset, sample_few_shot, write_image_png,
    write_label_png, DatasetSplits, Manifest, ScheduleConfig, SplitSizes, SyntheticWorldSpec,
    TaskSchedule,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, render_table, MetricsReport, TaskSelector};
use crate::network::{GridEmbedder, ModelSnapshot, SegmentationModel};
use crate::pseudolabel::dump_pseudo_labels;
use crate::trainer::{
    model_hash, run_experiment, run_incremental_step, sub_seed, train_base, ExperimentConfig,
    ExperimentReport, TrainConfig,
};

/// Environment variable that overrides the default output root.
pub const OUT_ENV: &str = "FSCIL_OUT";

#[derive(Debug, Parser)]
#[command(name = "fscil", version, about = "Few-shot class-incremental segmentation with retrieval pseudo-labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train the base-task model.
    TrainBase(TrainBaseArgs),
    /// Run one incremental step from the previous step's snapshot.
    Increment(IncrementArgs),
    /// Compute mIoU columns for a snapshot.
    Evaluate(EvaluateArgs),
    /// Repeated runs with mean ± confidence interval per method.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Total image count, split 40/15/35/10 into base/labeled/unlabeled/validation.
    #[arg(long, conflicts_with_all = ["base", "labeled", "unlabeled", "validation"])]
    pub count: Option<usize>,
    #[arg(long)]
    pub base: Option<usize>,
    #[arg(long)]
    pub labeled: Option<usize>,
    #[arg(long)]
    pub unlabeled: Option<usize>,
    #[arg(long)]
    pub validation: Option<usize>,
    /// JSON world description; the built-in driving world otherwise.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Dataset directory with images/, labels/ and manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Schedule file; defaults to <data>/schedule.json.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Training configuration (JSON or TOML); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output root.
    #[arg(long, env = OUT_ENV, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "k-neighbors")]
    pub k_neighbors: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Skip pseudo-labeling (the FT+KD baseline).
    #[arg(long)]
    pub no_pl: bool,
    /// Drop the distillation term.
    #[arg(long)]
    pub no_kd: bool,
    #[arg(long)]
    pub epochs_base: Option<usize>,
    #[arg(long)]
    pub epochs_phase1: Option<usize>,
    #[arg(long)]
    pub epochs_phase2: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainBaseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IncrementArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Schedule position t ≥ 2.
    #[arg(long, default_value_t = 2)]
    pub step: usize,
    #[arg(long, default_value_t = 5)]
    pub shots: usize,
    /// Snapshot of step t−1; defaults to <out>/step<t−1>/model.snap.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub snapshot: PathBuf,
    /// Comma list of task indices and `union`.
    #[arg(long, default_value = "1,2,union")]
    pub tasks: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 5)]
    pub shots: usize,
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
        Command::TrainBase(a) => cmd_train_base(&a).map(|_| ()),
        Command::Increment(a) => cmd_increment(&a).map(|_| ()),
        Command::Evaluate(a) => {
            let report = cmd_evaluate(&a)?;
            print!("{}", metrics_table(&report));
            Ok(())
        }
        Command::Experiment(a) => {
            let report = cmd_experiment(&a)?;
            print!("{}", report.render_table());
            Ok(())
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn split_sizes(a: &SynthArgs) -> SplitSizes {
    if let Some(n) = a.count {
        let labeled = n * 15 / 100;
        let unlabeled = n * 35 / 100;
        let validation = n / 10;
        return SplitSizes {
            base: n - labeled - unlabeled - validation,
            labeled,
            unlabeled,
            validation,
        };
    }
    let d = SplitSizes::default();
    SplitSizes {
        base: a.base.unwrap_or(d.base),
        labeled: a.labeled.unwrap_or(d.labeled),
        unlabeled: a.unlabeled.unwrap_or(d.unlabeled),
        validation: a.validation.unwrap_or(d.validation),
    }
}

/// Writes `images/`, `labels/` (pool labels included for diagnostics),
/// `manifest.json` and `schedule.json` under `out`.
pub fn cmd_synth(a: &SynthArgs) -> Result<PathBuf> {
    let spec = match &a.world {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SyntheticWorldSpec>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticWorldSpec::driving(),
    };
    let data = generate_splits(&spec, split_sizes(a), a.seed)?;
    let images = a.out.join("images");
    let labels = a.out.join("labels");
    for dir in [&images, &labels] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let s = &data.splits;
    for sample in s.base.iter().chain(&s.labeled).chain(&s.validation) {
        write_image_png(&images.join(format!("{}.png", sample.id)), &sample.image)?;
        write_label_png(&labels.join(format!("{}.png", sample.id)), &sample.labels)?;
    }
    for item in s.pool.items() {
        write_image_png(&images.join(format!("{}.png", item.stem)), &item.image)?;
        write_label_png(&labels.join(format!("{}.png", item.stem)), &data.pool_labels[&item.id])?;
    }
    data.manifest.save(&a.out.join("manifest.json"))?;
    write_json(&a.out.join("schedule.json"), &spec.default_schedule_config())?;
    write_json(&a.out.join("world.json"), &spec)?;
    info!("wrote {} images to {}", data.manifest.archetypes.len(), a.out.display());
    Ok(a.out.clone())
}

struct Loaded {
    schedule: TaskSchedule,
    splits: DatasetSplits,
}

fn load(d: &DataArgs) -> Result<Loaded> {
    let schedule_path = d.schedule.clone().unwrap_or_else(|| d.data.join("schedule.json"));
    let schedule = build_task_schedule(&ScheduleConfig::load(&schedule_path)?)?;
    let manifest = Manifest::load(&d.data.join("manifest.json"))?;
    let splits = load_dataset(&d.data, &manifest, &schedule)?;
    Ok(Loaded { schedule, splits })
}

fn train_config(d: &DataArgs, f: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &d.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let parsed = if p.extension().is_some_and(|e| e == "toml") {
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            } else {
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            };
            parsed?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if let Some(v) = f.k_neighbors {
        cfg.k_neighbors = v;
    }
    if let Some(v) = f.tau {
        cfg.tau = v;
    }
    if let Some(v) = f.epochs_base {
        cfg.epochs_base = v;
    }
    if let Some(v) = f.epochs_phase1 {
        cfg.epochs_phase1 = v;
    }
    if let Some(v) = f.epochs_phase2 {
        cfg.epochs_phase2 = v;
    }
    cfg.use_pl &= !f.no_pl;
    cfg.use_kd &= !f.no_kd;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct ConfigEcho<'a, A: Serialize> {
    command: &'a str,
    args: &'a A,
    resolved: &'a TrainConfig,
}

fn echo<A: Serialize>(out: &Path, command: &str, args: &A, resolved: &TrainConfig) -> Result<()> {
    write_json(
        &out.join(format!("{command}.config.json")),
        &ConfigEcho {
            command,
            args,
            resolved,
        },
    )
}

fn step_dir(out: &Path, t: usize) -> PathBuf {
    out.join(format!("step{t}"))
}

#[derive(Serialize)]
struct BaseReport<'a> {
    seed: u64,
    model_hash: String,
    training: &'a crate::trainer::PhaseReport,
    metrics: &'a MetricsReport,
}

pub fn cmd_train_base(a: &TrainBaseArgs) -> Result<PathBuf> {
    let cfg = train_config(&a.data, &a.train)?;
    let data = load(&a.data)?;
    let out = &a.data.out;
    echo(out, "train-base", a, &cfg)?;
    let (model, report) = train_base(&data.splits.base, &data.schedule, &cfg)?;
    let metrics = evaluate_model(&model, &data.splits.validation, &data.schedule, &[TaskSelector::Task(1)])?;
    let dir = step_dir(out, 1);
    let path = dir.join("model.snap");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    ModelSnapshot::capture(&model).save(&path)?;
    write_json(
        &dir.join("report.json"),
        &BaseReport {
            seed: cfg.seed,
            model_hash: model_hash(&model),
            training: &report,
            metrics: &metrics,
        },
    )?;
    print!("{}", metrics_table(&metrics));
    Ok(path)
}

fn load_previous(path: &Path, expected_step: usize) -> Result<SegmentationModel> {
    if !path.is_file() {
        return Err(Error::Snapshot(format!(
            "missing snapshot for step {expected_step} at {}",
            path.display()
        )));
    }
    let model = ModelSnapshot::load(path)?.restore()?;
    if model.step() != expected_step {
        return Err(Error::Snapshot(format!(
            "stale snapshot {}: expected step {expected_step}, found step {}",
            path.display(),
            model.step()
        )));
    }
    Ok(model)
}

pub fn cmd_increment(a: &IncrementArgs) -> Result<PathBuf> {
    let cfg = train_config(&a.data, &a.train)?;
    let data = load(&a.data)?;
    let t = a.step;
    if t < 2 || t > data.schedule.num_tasks() {
        return Err(Error::Usage(format!(
            "step must lie in 2..={}, got {t}",
            data.schedule.num_tasks()
        )));
    }
    let out = &a.data.out;
    echo(out, &format!("increment-step{t}"), a, &cfg)?;
    let snap = a
        .snapshot
        .clone()
        .unwrap_or_else(|| step_dir(out, t - 1).join("model.snap"));
    let previous = load_previous(&snap, t - 1)?;
    let fewshot = sample_few_shot(
        &data.splits.labeled,
        data.schedule.task(t)?,
        t,
        a.shots,
        sub_seed(cfg.seed, 100 + t as u64),
    )?;
    let outcome = run_incremental_step(
        &previous,
        &fewshot,
        &data.splits.pool,
        &data.schedule,
        &cfg,
        &GridEmbedder::default(),
    )?;
    let dir = step_dir(out, t);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    ModelSnapshot::capture(&outcome.initial).save(&dir.join("initial.snap"))?;
    let path = dir.join("model.snap");
    ModelSnapshot::capture(&outcome.model).save(&path)?;
    if !outcome.pseudo.is_empty() {
        dump_pseudo_labels(&outcome.pseudo, &dir.join("pseudo"), &outcome.report.initial_hash)?;
    }
    write_json(&dir.join("report.json"), &outcome.report)?;
    let selectors: Vec<TaskSelector> = (1..=t)
        .map(TaskSelector::Task)
        .chain([TaskSelector::UnionUpTo(t)])
        .collect();
    let metrics = evaluate_model(&outcome.model, &data.splits.validation, &data.schedule, &selectors)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    print!("{}", metrics_table(&metrics));
    Ok(path)
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<MetricsReport> {
    let data = load(&a.data)?;
    let model = ModelSnapshot::load(&a.snapshot)?.restore()?;
    let selectors = TaskSelector::parse_list(&a.tasks, model.step())?;
    if selectors.is_empty() {
        return Err(Error::Config("no task sets selected".into()));
    }
    for s in &selectors {
        let classes = s.classes(&data.schedule)?;
        if classes.max().is_some_and(|m| m as usize >= model.class_count()) {
            return Err(Error::Usage(format!(
                "{} needs classes the step-{} model does not predict",
                s.label(),
                model.step()
            )));
        }
    }
    let report = evaluate_model(&model, &data.splits.validation, &data.schedule, &selectors)?;
    write_json(
        &a.data.out.join(format!("metrics_step{}.json", model.step())),
        &report,
    )?;
    Ok(report)
}

/// Runs the repeated experiment and writes `experiment.json` plus an
/// aligned `experiment.txt` table under the output root.
pub fn cmd_experiment(a: &ExperimentArgs) -> Result<ExperimentReport> {
    let train = train_config(&a.data, &a.train)?;
    if a.runs == 0 {
        return Err(Error::Config("--runs must be at least 1".into()));
    }
    let data = load(&a.data)?;
    let out = &a.data.out;
    echo(out, "experiment", a, &train)?;
    let cfg = ExperimentConfig {
        train,
        shots: a.shots,
        runs: a.runs,
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&data.schedule, &data.splits, &cfg, &GridEmbedder::default())?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = out.join("experiment.json");
    std::fs::write(&json, report.to_json()?).map_err(|e| Error::io(&json, e))?;
    let txt = out.join("experiment.txt");
    std::fs::write(&txt, report.render_table()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}

/// One row of mIoU ×100 per task set.
pub fn metrics_table(report: &MetricsReport) -> String {
    let mut header = vec!["step".to_string()];
    header.extend(report.task_sets.iter().map(|m| m.label.clone()));
    let mut row = vec![report.step.to_string()];
    row.extend(
        report
            .task_sets
            .iter()
            .map(|m| m.miou.map_or("-".into(), |v| format!("{:.1}", v * 100.0))),
    );
    render_table(&header, &[row])
}
