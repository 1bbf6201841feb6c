//! Base training, the two-phase incremental step, and repeated experiments.

use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    sample_few_shot, DatasetSplits, FewShotSet, Sample, TaskSchedule, UnlabeledPool,
};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate_runs, evaluate_model, render_table, CiMethod, MetricsReport, RunStats, TaskSelector};
use crate::losses::{total_objective, SampleSource, Target, TermWeights};
use crate::network::{ArchConfig, ModelGrad, ModelSnapshot, ProbMap, SceneEmbedder, SegmentationModel};
use crate::pseudolabel::{
    assemble_augmented_set, infer_pseudo_labels, PseudoLabelMode, PseudoLabeledSet, TrainingItem,
};
use crate::retrieval::{embed_set, knn_neighborhoods, pairwise_cosine_distance};

/// Where phase 2 starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainInit {
    /// M_{t-1} with a freshly extended head.
    #[default]
    Previous,
    /// Continue from the phase-1 model.
    Initial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub epochs_base: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub flip: bool,
    pub tau: f64,
    pub k_neighbors: usize,
    pub weights: TermWeights,
    pub retrain_init: RetrainInit,
    pub pseudo_mode: PseudoLabelMode,
    pub use_pl: bool,
    pub use_kd: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            epochs_base: 30,
            epochs_phase1: 20,
            epochs_phase2: 20,
            lr: 1e-2,
            momentum: 0.9,
            batch_size: 4,
            seed: 0,
            flip: true,
            tau: 0.5,
            k_neighbors: 10,
            weights: TermWeights::default(),
            retrain_init: RetrainInit::Previous,
            pseudo_mode: PseudoLabelMode::Hard,
            use_pl: true,
            use_kd: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.epochs_base == 0 {
            return Err(Error::Config("epochs_base must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1), got {}", self.tau)));
        }
        if self.k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be at least 1".into()));
        }
        let w = &self.weights;
        if [w.fewshot_ce, w.pseudo_ce, w.kd].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss multipliers must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Term weights with the KD switch applied.
    pub fn effective_weights(&self) -> TermWeights {
        TermWeights {
            kd: if self.use_kd { self.weights.kd } else { 0.0 },
            ..self.weights
        }
    }

    pub fn method(&self) -> Method {
        Method::from_flags(self.use_kd, self.use_pl)
    }
}

/// Row labels for the methods an experiment can compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "FT+PL")]
    FtPl,
    #[serde(rename = "FT+KD")]
    FtKd,
    #[serde(rename = "FT+KD+PL")]
    FtKdPl,
}

impl Method {
    pub fn from_flags(kd: bool, pl: bool) -> Self {
        match (kd, pl) {
            (false, false) => Method::Ft,
            (false, true) => Method::FtPl,
            (true, false) => Method::FtKd,
            (true, true) => Method::FtKdPl,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Ft => "FT",
            Method::FtPl => "FT+PL",
            Method::FtKd => "FT+KD",
            Method::FtKdPl => "FT+KD+PL",
        }
    }
}

/// Derives an independent seed for a purpose within a run.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.random()
}

const STREAM_INIT: u64 = 1;
const STREAM_HEAD: u64 = 2;
const STREAM_BASE: u64 = 3;
const STREAM_PHASE1: u64 = 4;
const STREAM_PHASE2: u64 = 5;
const STREAM_FEWSHOT: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample objective at the end of the epoch, unflipped inputs.
    pub loss: f64,
    pub ce: f64,
    pub kd: f64,
    /// Mean objective over the epoch's minibatches as they were trained.
    pub running_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: String,
    pub items: usize,
    pub epochs: Vec<EpochLog>,
}

/// SGD with classical momentum: v ← μv + g, w ← w − lr·v.
struct Sgd {
    lr: f32,
    momentum: f32,
    velocity: ModelGrad,
}

impl Sgd {
    fn new(model: &SegmentationModel, lr: f64, momentum: f64) -> Self {
        Self {
            lr: lr as f32,
            momentum: momentum as f32,
            velocity: ModelGrad::zeros(model),
        }
    }

    fn step(&mut self, model: &mut SegmentationModel, grad: &ModelGrad) {
        for ((layer, v), g) in model
            .layers_mut()
            .iter_mut()
            .zip(&mut self.velocity.layers)
            .zip(&grad.layers)
        {
            for ((w, v), g) in layer.weight.iter_mut().zip(&mut v.weight).zip(&g.weight) {
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            }
            for ((b, v), g) in layer.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                *v = self.momentum * *v + g;
                *b -= self.lr * *v;
            }
        }
    }
}

/// Frozen teacher outputs for each item, plain and (optionally) flipped.
struct TeacherCache {
    plain: Vec<ProbMap>,
    flipped: Vec<Option<ProbMap>>,
}

impl TeacherCache {
    fn build(teacher: &SegmentationModel, items: &[TrainingItem], flip: bool) -> Result<Self> {
        let maps: Vec<(ProbMap, Option<ProbMap>)> = items
            .par_iter()
            .map(|it| {
                let plain = teacher.forward(&it.image)?;
                let flipped = if flip {
                    Some(teacher.forward(&it.image.flip_horizontal())?)
                } else {
                    None
                };
                Ok((plain, flipped))
            })
            .collect::<Result<_>>()?;
        let (plain, flipped) = maps.into_iter().unzip();
        Ok(Self { plain, flipped })
    }

    fn get(&self, idx: usize, flipped: bool) -> &ProbMap {
        if flipped {
            self.flipped[idx].as_ref().expect("flipped teacher output cached")
        } else {
            &self.plain[idx]
        }
    }
}

pub fn model_hash(model: &SegmentationModel) -> String {
    ModelSnapshot::capture(model).hash()
}

fn pixel_to_channel_major(grad: &[f64], channels: usize) -> Vec<f32> {
    let np = grad.len() / channels;
    let mut out = vec![0.0f32; grad.len()];
    for p in 0..np {
        for c in 0..channels {
            out[c * np + p] = grad[p * channels + c] as f32;
        }
    }
    out
}

struct PhaseSpec<'a> {
    name: &'static str,
    items: &'a [TrainingItem],
    teacher: Option<&'a SegmentationModel>,
    t: usize,
    epochs: usize,
    seed: u64,
}

/// Per-sample objective of `model` on every item, unflipped.
pub fn evaluate_objective(
    model: &SegmentationModel,
    teacher: Option<&SegmentationModel>,
    items: &[TrainingItem],
    schedule: &TaskSchedule,
    t: usize,
    weights: &TermWeights,
) -> Result<Vec<(f64, f64, f64)>> {
    items
        .par_iter()
        .map(|it| {
            let probs = model.forward(&it.image)?;
            let tp = teacher.map(|m| m.forward(&it.image)).transpose()?;
            let o = total_objective(&probs, tp.as_ref(), &it.target, it.source, schedule, t, weights)?;
            Ok((o.total, o.ce, o.kd))
        })
        .collect()
}

fn fit(
    model: &mut SegmentationModel,
    phase: PhaseSpec<'_>,
    schedule: &TaskSchedule,
    cfg: &TrainConfig,
) -> Result<PhaseReport> {
    let weights = cfg.effective_weights();
    let teacher = if weights.kd > 0.0 { phase.teacher } else { None };
    let items = phase.items;
    let mut report = PhaseReport {
        phase: phase.name.to_string(),
        items: items.len(),
        epochs: Vec::with_capacity(phase.epochs),
    };
    if phase.epochs == 0 || items.is_empty() {
        return Ok(report);
    }
    let cache = teacher
        .map(|m| TeacherCache::build(m, items, cfg.flip))
        .transpose()?;
    let mut sgd = Sgd::new(model, cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(phase.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();

    for epoch in 1..=phase.epochs {
        order.shuffle(&mut rng);
        let flips: Vec<bool> = order.iter().map(|_| cfg.flip && rng.random_bool(0.5)).collect();
        let mut running = 0.0;
        for (batch, batch_flips) in order.chunks(cfg.batch_size).zip(flips.chunks(cfg.batch_size)) {
            let frozen: &SegmentationModel = model;
            let results: Vec<(ModelGrad, f64)> = batch
                .par_iter()
                .zip(batch_flips)
                .map(|(&idx, &flip)| {
                    let it = &items[idx];
                    let (image, target) = if flip {
                        (it.image.flip_horizontal(), it.target.flip_horizontal())
                    } else {
                        (it.image.clone(), it.target.clone())
                    };
                    let trace = frozen.forward_trace(&image)?;
                    let probs = trace.logits.probs();
                    let tp = cache.as_ref().map(|c| c.get(idx, flip));
                    let obj = total_objective(&probs, tp, &target, it.source, schedule, phase.t, &weights)?;
                    let gl = pixel_to_channel_major(&obj.grad, probs.channels());
                    let mut g = ModelGrad::zeros(frozen);
                    frozen.backward(&trace, &gl, &mut g);
                    Ok((g, obj.total))
                })
                .collect::<Result<_>>()?;
            let mut iter = results.into_iter();
            let (mut grad, first) = iter.next().expect("non-empty batch");
            running += first;
            for (g, v) in iter {
                grad.add_assign(&g);
                running += v;
            }
            grad.scale(1.0 / batch.len() as f32);
            sgd.step(model, &grad);
        }
        let values = evaluate_objective(model, teacher, items, schedule, phase.t, &weights)?;
        let n = values.len() as f64;
        let log = EpochLog {
            epoch,
            loss: values.iter().map(|v| v.0).sum::<f64>() / n,
            ce: values.iter().map(|v| v.1).sum::<f64>() / n,
            kd: values.iter().map(|v| v.2).sum::<f64>() / n,
            running_loss: running / n,
        };
        debug!("{} epoch {epoch}: loss {:.5}", phase.name, log.loss);
        report.epochs.push(log);
    }
    Ok(report)
}

/// Trains M_1 on fully labeled base images; labels outside C_1 are ignored.
pub fn train_base(
    base: &[Sample],
    schedule: &TaskSchedule,
    cfg: &TrainConfig,
) -> Result<(SegmentationModel, PhaseReport)> {
    cfg.validate()?;
    if base.is_empty() {
        return Err(Error::Usage("the base training set is empty".into()));
    }
    let c1 = schedule.task(1)?;
    let items: Vec<TrainingItem> = base
        .iter()
        .map(|s| TrainingItem {
            key: s.id.clone(),
            image: s.image.clone(),
            target: Target::Hard(s.labels.restrict_to(c1)),
            source: SampleSource::FewShot,
        })
        .collect();
    let mut model = SegmentationModel::new(cfg.arch.clone(), c1.len(), sub_seed(cfg.seed, STREAM_INIT))?;
    model.set_step(1);
    let report = fit(
        &mut model,
        PhaseSpec {
            name: "base",
            items: &items,
            teacher: None,
            t: 1,
            epochs: cfg.epochs_base,
            seed: sub_seed(cfg.seed, STREAM_BASE),
        },
        schedule,
        cfg,
    )?;
    Ok((model, report))
}

fn check_previous(previous: &SegmentationModel, schedule: &TaskSchedule, t: usize) -> Result<()> {
    if t < 2 || t > schedule.num_tasks() {
        return Err(Error::Usage(format!(
            "incremental step {t} is outside 2..={}",
            schedule.num_tasks()
        )));
    }
    let expected = schedule.class_count_up_to(t - 1)?;
    if previous.step() != t - 1 || previous.class_count() != expected {
        return Err(Error::Usage(format!(
            "step {t} needs the model of step {} with {expected} classes, got step {} with {}",
            t - 1,
            previous.step(),
            previous.class_count()
        )));
    }
    Ok(())
}

/// M_{t-1} with its head grown to cover C_t.
pub fn extended_student(
    previous: &SegmentationModel,
    schedule: &TaskSchedule,
    t: usize,
    seed: u64,
) -> Result<SegmentationModel> {
    check_previous(previous, schedule, t)?;
    let mut m = previous.clone();
    m.extend_head(schedule.task(t)?.len(), sub_seed(seed, STREAM_HEAD))?;
    m.set_step(t);
    Ok(m)
}

fn fewshot_items(fewshot: &FewShotSet) -> Vec<TrainingItem> {
    fewshot
        .items
        .iter()
        .map(|s| TrainingItem {
            key: s.id.clone(),
            image: s.image.clone(),
            target: Target::Hard(s.labels.clone()),
            source: SampleSource::FewShot,
        })
        .collect()
}

/// Phase 1: few-shot cross-entropy plus distillation from the frozen
/// previous model. With KD disabled this is plain fine-tuning.
pub fn train_increment_initial(
    previous: &SegmentationModel,
    fewshot: &FewShotSet,
    schedule: &TaskSchedule,
    cfg: &TrainConfig,
) -> Result<(SegmentationModel, PhaseReport)> {
    cfg.validate()?;
    let t = fewshot.task_index;
    let mut model = extended_student(previous, schedule, t, cfg.seed)?;
    if fewshot.is_empty() {
        return Err(Error::Usage(format!("few-shot set for step {t} is empty")));
    }
    let items = fewshot_items(fewshot);
    let report = fit(
        &mut model,
        PhaseSpec {
            name: "phase1",
            items: &items,
            teacher: Some(previous),
            t,
            epochs: cfg.epochs_phase1,
            seed: sub_seed(cfg.seed, STREAM_PHASE1),
        },
        schedule,
        cfg,
    )?;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSummary {
    pub k_requested: usize,
    pub k_used: usize,
    pub clamped: bool,
    /// Pool ids in N^t, ascending.
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub seed: u64,
    pub method: Method,
    pub fewshot: Vec<String>,
    pub phase1: PhaseReport,
    pub phase2: Option<PhaseReport>,
    pub neighborhood: Option<NeighborhoodSummary>,
    pub pseudo_items: usize,
    pub pseudo_coverage: Option<f64>,
    pub teacher_hash: String,
    pub initial_hash: String,
    pub final_hash: String,
    /// Set when the pool was empty and the phase-1 model was returned.
    pub degraded: bool,
    pub warnings: Vec<String>,
    pub wall_clock_secs: f64,
}

pub struct StepOutcome {
    /// M_t_init, the FT+KD model.
    pub initial: SegmentationModel,
    /// Final M_t.
    pub model: SegmentationModel,
    pub pseudo: PseudoLabeledSet,
    pub report: StepReport,
}

/// The full incremental step: phase 1, retrieval of scene neighbours of the
/// few-shot images, pseudo-labeling with M_t_init, and retraining on the
/// augmented set with all three objective terms.
pub fn run_incremental_step(
    previous: &SegmentationModel,
    fewshot: &FewShotSet,
    pool: &UnlabeledPool,
    schedule: &TaskSchedule,
    cfg: &TrainConfig,
    embedder: &dyn SceneEmbedder,
) -> Result<StepOutcome> {
    let started = Instant::now();
    let t = fewshot.task_index;
    let teacher_hash = model_hash(previous);
    let (initial, phase1) = train_increment_initial(previous, fewshot, schedule, cfg)?;
    let initial_hash = model_hash(&initial);
    let mut report = StepReport {
        step: t,
        seed: cfg.seed,
        method: cfg.method(),
        fewshot: fewshot.items.iter().map(|s| s.id.clone()).collect(),
        phase1,
        phase2: None,
        neighborhood: None,
        pseudo_items: 0,
        pseudo_coverage: None,
        teacher_hash,
        initial_hash: initial_hash.clone(),
        final_hash: initial_hash,
        degraded: false,
        warnings: Vec::new(),
        wall_clock_secs: 0.0,
    };
    let mut pseudo = PseudoLabeledSet::empty(t, cfg.tau);
    if !cfg.use_pl {
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        return Ok(StepOutcome {
            model: initial.clone(),
            initial,
            pseudo,
            report,
        });
    }
    if pool.is_empty() {
        warn!("step {t}: unlabeled pool is empty, keeping the phase-1 model");
        report.degraded = true;
        report.warnings.push("empty unlabeled pool; pseudo-labeling skipped".into());
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        return Ok(StepOutcome {
            model: initial.clone(),
            initial,
            pseudo,
            report,
        });
    }

    let queries: Vec<(u32, &crate::datamodel::Image)> = fewshot
        .items
        .iter()
        .enumerate()
        .map(|(i, s)| (i as u32 + 1, &s.image))
        .collect();
    let candidates: Vec<(u32, &crate::datamodel::Image)> =
        pool.items().iter().map(|p| (p.id, &p.image)).collect();
    let f = embed_set(embedder, &queries)?;
    let g = embed_set(embedder, &candidates)?;
    let nb = knn_neighborhoods(&pairwise_cosine_distance(&f, &g)?, cfg.k_neighbors)?;
    if nb.clamped {
        report.warnings.push(format!(
            "K={} exceeds the pool size; using K={}",
            nb.k_requested, nb.k_used
        ));
    }
    pseudo = infer_pseudo_labels(
        &initial,
        pool,
        &nb.union,
        schedule.task(t)?,
        cfg.tau,
        cfg.pseudo_mode,
        t,
    )?;
    report.neighborhood = Some(NeighborhoodSummary {
        k_requested: nb.k_requested,
        k_used: nb.k_used,
        clamped: nb.clamped,
        ids: nb.union.clone(),
    });
    report.pseudo_items = pseudo.len();
    report.pseudo_coverage = Some(pseudo.coverage());
    info!(
        "step {t}: {} neighbours, pseudo-label coverage {:.3}",
        pseudo.len(),
        pseudo.coverage()
    );

    let augmented = assemble_augmented_set(fewshot, &pseudo)?;
    let mut model = match cfg.retrain_init {
        RetrainInit::Previous => extended_student(previous, schedule, t, cfg.seed)?,
        RetrainInit::Initial => initial.clone(),
    };
    let phase2 = fit(
        &mut model,
        PhaseSpec {
            name: "phase2",
            items: &augmented,
            teacher: Some(previous),
            t,
            epochs: cfg.epochs_phase2,
            seed: sub_seed(cfg.seed, STREAM_PHASE2),
        },
        schedule,
        cfg,
    )?;
    report.phase2 = Some(phase2);
    report.final_hash = model_hash(&model);
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(StepOutcome {
        initial,
        model,
        pseudo,
        report,
    })
}

/// Settings for repeated runs on top of a training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub shots: usize,
    pub runs: usize,
    pub confidence: f64,
    pub ci: CiMethod,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            shots: 5,
            runs: 5,
            confidence: 0.95,
            ci: CiMethod::StudentT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStepRecord {
    pub step: usize,
    pub fewshot: Vec<String>,
    pub neighborhood_size: Option<usize>,
    pub pseudo_coverage: Option<f64>,
    pub degraded: bool,
    /// Snapshot hash per method row.
    pub hashes: Vec<(Method, String)>,
    /// mIoU ×100 per (method, task-set label).
    pub miou: Vec<(Method, String, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub error: Option<String>,
    pub steps: Vec<RunStepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub stage: usize,
    pub task_set: String,
    pub stats: Option<RunStats>,
    /// Per-run values (×100), `None` for failed runs or undefined mIoU.
    pub values: Vec<Option<f64>>,
}

/// Seed-paired difference `method − baseline`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub stage: usize,
    pub task_set: String,
    pub baseline: Method,
    pub method: Method,
    pub mean_difference: Option<f64>,
    pub wins: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub base_model_hash: String,
    pub base_metrics: MetricsReport,
    pub rows: Vec<AggregateRow>,
    pub comparisons: Vec<PairedComparison>,
    pub runs: Vec<RunRecord>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn row(&self, method: Method, stage: usize, task_set: &str) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.stage == stage && r.task_set == task_set)
    }

    pub fn comparison(&self, stage: usize, task_set: &str) -> Option<&PairedComparison> {
        self.comparisons
            .iter()
            .find(|c| c.stage == stage && c.task_set == task_set)
    }

    /// Methods × stages against task-set columns, cells as `mean±half-width`.
    pub fn render_table(&self) -> String {
        let mut columns: Vec<String> = Vec::new();
        for r in &self.rows {
            if !columns.contains(&r.task_set) {
                columns.push(r.task_set.clone());
            }
        }
        columns.sort_by_key(|c| (c.contains('∪'), c.len(), c.clone()));
        let mut keys: Vec<(usize, Method)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.stage, r.method)) {
                keys.push((r.stage, r.method));
            }
        }
        let mut header = vec!["method".to_string(), "stage".to_string()];
        header.extend(columns.iter().cloned());
        let mut rows = vec![{
            let mut base = vec!["base".to_string(), "1".to_string()];
            for c in &columns {
                let v = self
                    .base_metrics
                    .task_sets
                    .iter()
                    .find(|m| &m.label == c)
                    .and_then(|m| m.miou);
                base.push(v.map_or("-".into(), |v| format!("{:.1}", v * 100.0)));
            }
            base
        }];
        for (stage, method) in keys {
            let mut row = vec![method.label().to_string(), stage.to_string()];
            for c in &columns {
                let cell = self
                    .row(method, stage, c)
                    .and_then(|r| r.stats)
                    .map_or("-".into(), |s| s.render());
                row.push(cell);
            }
            rows.push(row);
        }
        render_table(&header, &rows)
    }
}

fn selectors_for(step: usize) -> Vec<TaskSelector> {
    let mut s: Vec<TaskSelector> = (1..=step).map(TaskSelector::Task).collect();
    if step > 1 {
        s.push(TaskSelector::UnionUpTo(step));
    }
    s
}

fn run_once(
    run: usize,
    base_model: &SegmentationModel,
    schedule: &TaskSchedule,
    splits: &DatasetSplits,
    cfg: &ExperimentConfig,
    embedder: &dyn SceneEmbedder,
) -> Result<Vec<RunStepRecord>> {
    let seed = cfg.train.seed.wrapping_add(run as u64);
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let baseline = Method::from_flags(train.use_kd, false);
    let mut chain_plain = base_model.clone();
    let mut chain_pl = base_model.clone();
    let mut records = Vec::new();
    for t in 2..=schedule.num_tasks() {
        let fewshot = sample_few_shot(
            &splits.labeled,
            schedule.task(t)?,
            t,
            cfg.shots,
            sub_seed(seed, STREAM_FEWSHOT + t as u64),
        )?;
        let mut models: Vec<(Method, SegmentationModel)> = Vec::new();
        let mut rec = RunStepRecord {
            step: t,
            fewshot: fewshot.items.iter().map(|s| s.id.clone()).collect(),
            neighborhood_size: None,
            pseudo_coverage: None,
            degraded: false,
            hashes: Vec::new(),
            miou: Vec::new(),
        };
        if train.use_pl {
            if t > 2 {
                let (m, _) = train_increment_initial(&chain_plain, &fewshot, schedule, &train)?;
                models.push((baseline, m));
            }
            let out = run_incremental_step(&chain_pl, &fewshot, &splits.pool, schedule, &train, embedder)?;
            if t == 2 {
                models.push((baseline, out.initial));
            }
            rec.neighborhood_size = out.report.neighborhood.as_ref().map(|n| n.ids.len());
            rec.pseudo_coverage = out.report.pseudo_coverage;
            rec.degraded = out.report.degraded;
            models.push((train.method(), out.model));
        } else {
            let (m, _) = train_increment_initial(&chain_plain, &fewshot, schedule, &train)?;
            models.push((baseline, m));
        }
        for (method, model) in &models {
            rec.hashes.push((*method, model_hash(model)));
            let metrics = evaluate_model(model, &splits.validation, schedule, &selectors_for(t))?;
            for m in metrics.task_sets {
                rec.miou.push((*method, m.label, m.miou.map(|v| v * 100.0)));
            }
        }
        for (method, model) in models {
            if method == baseline {
                chain_plain = model;
            } else {
                chain_pl = model;
            }
        }
        records.push(rec);
    }
    Ok(records)
}

/// Trains the base model once, then repeats every incremental step for
/// seeds `seed+0 … seed+runs−1` with freshly sampled few-shot sets.
pub fn run_experiment(
    schedule: &TaskSchedule,
    splits: &DatasetSplits,
    cfg: &ExperimentConfig,
    embedder: &dyn SceneEmbedder,
) -> Result<ExperimentReport> {
    cfg.train.validate()?;
    let (base, _) = train_base(&splits.base, schedule, &cfg.train)?;
    run_experiment_with_base(&base, schedule, splits, cfg, embedder)
}

/// [`run_experiment`] with a given base model.
pub fn run_experiment_with_base(
    base: &SegmentationModel,
    schedule: &TaskSchedule,
    splits: &DatasetSplits,
    cfg: &ExperimentConfig,
    embedder: &dyn SceneEmbedder,
) -> Result<ExperimentReport> {
    cfg.train.validate()?;
    if cfg.runs == 0 {
        return Err(Error::Config("runs must be at least 1".into()));
    }
    if schedule.num_tasks() < 2 {
        return Err(Error::Config("an experiment needs at least one incremental task".into()));
    }
    check_previous(base, schedule, 2)?;
    let base_metrics = evaluate_model(base, &splits.validation, schedule, &selectors_for(1))?;

    let mut runs = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs {
        let seed = cfg.train.seed.wrapping_add(r as u64);
        info!("run {}/{} (seed {seed})", r + 1, cfg.runs);
        match run_once(r, base, schedule, splits, cfg, embedder) {
            Ok(steps) => runs.push(RunRecord {
                run: r,
                seed,
                error: None,
                steps,
            }),
            Err(e) => {
                warn!("run {r} (seed {seed}) failed: {e}");
                runs.push(RunRecord {
                    run: r,
                    seed,
                    error: Some(e.to_string()),
                    steps: Vec::new(),
                });
            }
        }
    }

    let baseline = Method::from_flags(cfg.train.use_kd, false);
    let mut methods = vec![baseline];
    if cfg.train.use_pl {
        methods.push(cfg.train.method());
    }
    let mut rows = Vec::new();
    let mut comparisons = Vec::new();
    for t in 2..=schedule.num_tasks() {
        for sel in selectors_for(t) {
            let label = sel.label();
            let mut per_method = Vec::new();
            for &method in &methods {
                let values: Vec<Option<f64>> = runs
                    .iter()
                    .map(|run| {
                        run.steps
                            .iter()
                            .find(|s| s.step == t)
                            .and_then(|s| s.miou.iter().find(|(m, l, _)| *m == method && *l == label))
                            .and_then(|(_, _, v)| *v)
                    })
                    .collect();
                let present: Vec<f64> = values.iter().flatten().copied().collect();
                let stats = if present.is_empty() {
                    None
                } else {
                    Some(aggregate_runs(&present, cfg.confidence, cfg.ci)?)
                };
                per_method.push(values.clone());
                rows.push(AggregateRow {
                    method,
                    stage: t,
                    task_set: label.clone(),
                    stats,
                    values,
                });
            }
            if per_method.len() == 2 {
                let diffs: Vec<f64> = per_method[0]
                    .iter()
                    .zip(&per_method[1])
                    .filter_map(|(a, b)| Some((*b)? - (*a)?))
                    .collect();
                comparisons.push(PairedComparison {
                    stage: t,
                    task_set: label.clone(),
                    baseline,
                    method: methods[1],
                    mean_difference: (!diffs.is_empty())
                        .then(|| diffs.iter().sum::<f64>() / diffs.len() as f64),
                    wins: diffs.iter().filter(|d| **d > 0.0).count(),
                    pairs: diffs.len(),
                });
            }
        }
    }
    Ok(ExperimentReport {
        config: cfg.clone(),
        base_model_hash: model_hash(base),
        base_metrics,
        rows,
        comparisons,
        runs,
    })
}
