//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always reach stdout.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fscil_seg::cli::{cmd_experiment, DataArgs, ExperimentArgs, SynthArgs, TrainFlags};
use fscil_seg::datamodel::{
    build_task_schedule, generate_splits, ClassId, ClassSet, LabelMap, ScheduleConfig, SplitSizes,
    SyntheticWorldSpec, TaskSchedule, IGNORE_VALUE,
};
use fscil_seg::evaluation::{aggregate_runs, CiMethod, ConfusionMatrix, RunStats};
use fscil_seg::losses::{
    distillation_loss, masked_cross_entropy, total_objective, SampleSource, Target, TermWeights,
};
use fscil_seg::network::{GridEmbedder, ProbMap};
use fscil_seg::retrieval::{
    knn_neighborhoods, scale_invariance_check, DistanceMatrix, EmbeddingMatrix,
};
use fscil_seg::trainer::{run_experiment_with_base, train_base, ExperimentConfig, Method, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    let in_time = limit.is_none_or(|l| took <= l);
    let pass = out.pass && in_time;
    let budget = limit.map_or(String::new(), |l| format!(" / limit {:.0}s", l.as_secs_f64()));
    println!(
        "{} [{id}] {name}: {} ({:.1}s{budget})",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64()
    );
    pass
}

fn random_probs(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> (Vec<f64>, ProbMap) {
    let logits: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-3.0..3.0)).collect();
    let pm = ProbMap::from_logits(h, w, c, &logits).unwrap();
    (logits, pm)
}

/// Two-task schedule over `c` channels with `old` base classes.
fn two_task_schedule(c: usize, old: usize) -> TaskSchedule {
    let names: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
    build_task_schedule(&ScheduleConfig::from_lists(&[&names[..old], &names[old..]])).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> LabelMap {
    let values = (0..h * w)
        .map(|_| {
            if rng.random_bool(0.15) {
                IGNORE_VALUE
            } else {
                rng.random_range(0..c) as ClassId
            }
        })
        .collect();
    LabelMap::new(h, w, values).unwrap()
}

struct Instance {
    h: usize,
    w: usize,
    c: usize,
    old: usize,
    logits: Vec<f64>,
    student: ProbMap,
    teacher: ProbMap,
    labels: LabelMap,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let h = rng.random_range(1..=8);
    let w = rng.random_range(1..=8);
    let c = rng.random_range(2..=6);
    let old = rng.random_range(1..c);
    let (logits, student) = random_probs(rng, h, w, c);
    let (_, teacher) = random_probs(rng, h, w, old);
    let labels = random_labels(rng, h, w, c);
    Instance {
        h,
        w,
        c,
        old,
        logits,
        student,
        teacher,
        labels,
    }
}

fn ce_oracle(i: &Instance, current: &[ClassId]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..i.h {
        for x in 0..i.w {
            let l = i.labels.get(y, x);
            if l != IGNORE_VALUE && current.contains(&l) {
                sum += -i.student.prob(y * i.w + x, l as usize).max(1e-12).ln();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn kd_oracle(i: &Instance, current: &[ClassId]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..i.h {
        for x in 0..i.w {
            let l = i.labels.get(y, x);
            if l != IGNORE_VALUE && current.contains(&l) {
                continue;
            }
            let p = y * i.w + x;
            for k in 0..i.old {
                sum += -i.teacher.prob(p, k) * i.student.prob(p, k).max(1e-12).ln();
            }
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn criterion_loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let i = instance(&mut rng);
        let current: Vec<ClassId> = (i.old as ClassId..i.c as ClassId).collect();
        let cur = ClassSet::new(current.iter().copied());
        let old = ClassSet::new(0..i.old as ClassId);
        let ce = masked_cross_entropy(&i.student, &i.labels, &cur).unwrap().value;
        let kd = distillation_loss(&i.student, &i.teacher, &i.labels, &cur, &old).unwrap().value;
        worst = worst.max((ce - ce_oracle(&i, &current)).abs());
        worst = worst.max((kd - kd_oracle(&i, &current)).abs());
    }
    let hand = masked_cross_entropy(
        &ProbMap::from_probs(1, 1, 2, vec![0.8, 0.2]).unwrap(),
        &LabelMap::new(1, 1, vec![0]).unwrap(),
        &ClassSet::new([0, 1]),
    )
    .unwrap()
    .value;
    let hand_ok = (hand - 0.223_14).abs() < 5e-6 && (hand + 0.8f64.ln()).abs() < 1e-12;
    Outcome {
        pass: worst <= 1e-9 && hand_ok,
        detail: format!("200 instances, max |Δ| {worst:.1e}; −ln 0.8 → {hand:.5}"),
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn central_difference(logits: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let step = 1e-4;
    let mut x = logits.to_vec();
    (0..x.len())
        .map(|j| {
            let orig = x[j];
            x[j] = orig + step;
            let up = f(&x);
            x[j] = orig - step;
            let dn = f(&x);
            x[j] = orig;
            (up - dn) / (2.0 * step)
        })
        .collect()
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for n in 0..50 {
        let i = instance(&mut rng);
        let schedule = two_task_schedule(i.c, i.old);
        let cur = schedule.task(2).unwrap().clone();
        let old = schedule.task(1).unwrap().clone();
        let pm = |x: &[f64]| ProbMap::from_logits(i.h, i.w, i.c, x).unwrap();

        let ce = masked_cross_entropy(&i.student, &i.labels, &cur).unwrap();
        let fd = central_difference(&i.logits, |x| masked_cross_entropy(&pm(x), &i.labels, &cur).unwrap().value);
        worst = worst.max(rel_err(&ce.grad, &fd));

        let kd = distillation_loss(&i.student, &i.teacher, &i.labels, &cur, &old).unwrap();
        let fd = central_difference(&i.logits, |x| {
            distillation_loss(&pm(x), &i.teacher, &i.labels, &cur, &old).unwrap().value
        });
        worst = worst.max(rel_err(&kd.grad, &fd));

        let source = if n % 2 == 0 { SampleSource::FewShot } else { SampleSource::Pseudo };
        let weights = TermWeights::default();
        let target = Target::Hard(i.labels.restrict_to(&cur));
        let total = total_objective(&i.student, Some(&i.teacher), &target, source, &schedule, 2, &weights).unwrap();
        let fd = central_difference(&i.logits, |x| {
            total_objective(&pm(x), Some(&i.teacher), &target, source, &schedule, 2, &weights)
                .unwrap()
                .total
        });
        worst = worst.max(rel_err(&total.grad, &fd));
    }
    Outcome {
        pass: worst <= 1e-4,
        detail: format!("50 instances × 3 objectives, max relative error {worst:.1e}"),
    }
}

fn exhaustive_knn(d: &DistanceMatrix, k: usize) -> Vec<Vec<u32>> {
    (0..d.rows())
        .map(|i| {
            let mut all: Vec<(f64, u32)> = d.row(i).iter().copied().zip(d.col_ids().iter().copied()).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, id)| id).collect()
        })
        .collect()
}

fn random_embeddings(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> EmbeddingMatrix {
    let cols = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    EmbeddingMatrix::from_columns(dim, (1..=n as u32).collect(), cols).unwrap()
}

fn criterion_knn() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut matched = 0;
    for _ in 0..100 {
        let rows = rng.random_range(1..=50);
        let cols = rng.random_range(1..=500);
        // coarse quantization forces plenty of exact ties
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| (rng.random_range(0.0..2.0f64) * 20.0).round() / 20.0)
            .collect();
        let d = DistanceMatrix::new((1..=rows as u32).collect(), (1..=cols as u32).collect(), data).unwrap();
        let k = rng.random_range(1..=cols.min(20));
        let nb = knn_neighborhoods(&d, k).unwrap();
        let oracle = exhaustive_knn(&d, k);
        let union: BTreeSet<u32> = oracle.iter().flatten().copied().collect();
        if nb.per_query == oracle && nb.union == union.into_iter().collect::<Vec<_>>() {
            matched += 1;
        }
    }
    let mut invariant = 0;
    for _ in 0..100 {
        let dim = rng.random_range(2..=32);
        let (nf, ng) = (rng.random_range(1..=10), rng.random_range(1..=100));
        let f = random_embeddings(&mut rng, dim, nf);
        let g = random_embeddings(&mut rng, dim, ng);
        let alpha = 10f64.powf(rng.random_range(-2.0..2.0));
        let k = rng.random_range(1..=10);
        if scale_invariance_check(&f, &g, alpha, k).unwrap() {
            invariant += 1;
        }
    }
    Outcome {
        pass: matched == 100 && invariant == 100,
        detail: format!("exhaustive-sort match {matched}/100, rescaling invariance {invariant}/100"),
    }
}

fn criterion_miou() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut exact = 0;
    let mut merged_ok = 0;
    let trials = 50;
    for _ in 0..trials {
        let c = rng.random_range(2..=6);
        let classes = ClassSet::new(0..c as ClassId);
        let maps: Vec<(LabelMap, LabelMap)> = (0..rng.random_range(2..=6))
            .map(|_| {
                let pred = LabelMap::new(6, 6, (0..36).map(|_| rng.random_range(0..c) as ClassId).collect()).unwrap();
                (pred, random_labels(&mut rng, 6, 6, c))
            })
            .collect();
        let mut counts = vec![vec![0u64; c]; c];
        for (pred, gt) in &maps {
            for y in 0..6 {
                for x in 0..6 {
                    let g = gt.get(y, x);
                    if g != IGNORE_VALUE {
                        counts[g as usize][pred.get(y, x) as usize] += 1;
                    }
                }
            }
        }
        let mut ious = Vec::new();
        for k in 0..c {
            let tp = counts[k][k];
            let fp: u64 = (0..c).filter(|&g| g != k).map(|g| counts[g][k]).sum();
            let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| counts[k][p]).sum();
            if tp + fp + fn_ > 0 {
                ious.push(tp as f64 / (tp + fp + fn_) as f64);
            }
        }
        let oracle = ious.iter().sum::<f64>() / ious.len() as f64;

        let mut single = ConfusionMatrix::new(classes.clone());
        for (pred, gt) in &maps {
            single.accumulate(pred, gt).unwrap();
        }
        let cells_match = (0..c).all(|g| (0..c).all(|p| single.count(g as ClassId, p as ClassId) == counts[g][p]));
        if cells_match && single.miou(&classes).unwrap() == oracle {
            exact += 1;
        }
        let mid = maps.len() / 2;
        let mut a = ConfusionMatrix::new(classes.clone());
        let mut b = ConfusionMatrix::new(classes.clone());
        for (pred, gt) in &maps[..mid] {
            a.accumulate(pred, gt).unwrap();
        }
        for (pred, gt) in maps[mid..].iter().rev() {
            b.accumulate(pred, gt).unwrap();
        }
        a.merge(&b).unwrap();
        if a == single {
            merged_ok += 1;
        }
    }
    let mut hand = ConfusionMatrix::new(ClassSet::new([0, 1]));
    hand.accumulate(
        &LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap(),
        &LabelMap::new(1, 4, vec![0, 1, 1, 1]).unwrap(),
    )
    .unwrap();
    let h = hand.miou(&ClassSet::new([0, 1])).unwrap();
    let hand_ok = (h - 7.0 / 12.0).abs() <= 1e-12;
    Outcome {
        pass: exact == trials && merged_ok == trials && hand_ok,
        detail: format!(
            "oracle match {exact}/{trials}, shard merge {merged_ok}/{trials}, hand case {h:.12} (7/12)"
        ),
    }
}

struct World {
    schedule: TaskSchedule,
    data: fscil_seg::datamodel::SyntheticDataset,
    base: fscil_seg::network::SegmentationModel,
    base_time: Duration,
    cfg: ExperimentConfig,
}

fn world() -> World {
    let spec = SyntheticWorldSpec::driving();
    let schedule = spec.default_schedule().unwrap();
    let data = generate_splits(&spec, SplitSizes::default(), 7).unwrap();
    let cfg = ExperimentConfig {
        train: TrainConfig::default(),
        shots: 5,
        runs: 5,
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let (base, _) = train_base(&data.splits.base, &schedule, &cfg.train).unwrap();
    World {
        schedule,
        data,
        base,
        base_time: start.elapsed(),
        cfg,
    }
}

fn fmt_stats(s: Option<RunStats>) -> String {
    s.map_or("-".into(), |s| s.render())
}

fn criterion_pl_beats_ftkd(w: &World) -> Outcome {
    let start = Instant::now();
    let r = run_experiment_with_base(&w.base, &w.schedule, &w.data.splits, &w.cfg, &GridEmbedder::default())
        .unwrap();
    let ftkd = r.row(Method::FtKd, 2, "T1∪2").unwrap();
    let pl = r.row(Method::FtKdPl, 2, "T1∪2").unwrap();
    let cmp = r.comparison(2, "T1∪2").unwrap();
    let failed = r.runs.iter().filter(|run| run.error.is_some()).count();
    let (a, b) = (ftkd.stats.map(|s| s.mean), pl.stats.map(|s| s.mean));
    let total = w.base_time + start.elapsed();
    Outcome {
        pass: failed == 0 && matches!((a, b), (Some(a), Some(b)) if b > a) && cmp.wins >= 4 && cmp.pairs == 5,
        detail: format!(
            "T1∪2 FT+KD {} vs FT+KD+PL {}, paired wins {}/{} (incl. base training, {:.0}s total)",
            fmt_stats(ftkd.stats),
            fmt_stats(pl.stats),
            cmp.wins,
            cmp.pairs,
            total.as_secs_f64()
        ),
    }
}

fn criterion_forgetting(w: &World) -> Outcome {
    let start = Instant::now();
    let variant = |use_kd: bool| {
        let cfg = ExperimentConfig {
            train: TrainConfig {
                use_kd,
                use_pl: false,
                ..w.cfg.train.clone()
            },
            ..w.cfg.clone()
        };
        run_experiment_with_base(&w.base, &w.schedule, &w.data.splits, &cfg, &GridEmbedder::default()).unwrap()
    };
    let with_kd = variant(true);
    let without = variant(false);
    let a = with_kd.row(Method::FtKd, 2, "T1").and_then(|r| r.stats);
    let b = without.row(Method::Ft, 2, "T1").and_then(|r| r.stats);
    let gap = match (a, b) {
        (Some(a), Some(b)) => a.mean - b.mean,
        _ => f64::NEG_INFINITY,
    };
    let total = w.base_time + start.elapsed();
    Outcome {
        pass: gap >= 10.0 && total <= Duration::from_secs(300),
        detail: format!(
            "T1 after one increment: FT+KD {} vs FT {}, gap {gap:.1} points (incl. base training, {:.0}s total)",
            fmt_stats(a),
            fmt_stats(b),
            total.as_secs_f64()
        ),
    }
}

fn criterion_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fscil_seg::cli::cmd_synth(&SynthArgs {
        out: data.clone(),
        count: None,
        base: Some(24),
        labeled: Some(20),
        unlabeled: Some(30),
        validation: Some(8),
        world: None,
        seed: 5,
    })
    .unwrap();
    let run = |out: &str| {
        let args = ExperimentArgs {
            data: DataArgs {
                data: data.clone(),
                schedule: None,
                config: None,
                out: tmp.path().join(out),
            },
            train: TrainFlags {
                seed: Some(3),
                k_neighbors: Some(4),
                tau: None,
                no_pl: false,
                no_kd: false,
                epochs_base: Some(3),
                epochs_phase1: Some(3),
                epochs_phase2: Some(3),
            },
            runs: 2,
            shots: 3,
        };
        cmd_experiment(&args).unwrap();
        std::fs::read(tmp.path().join(out).join("experiment.json")).unwrap()
    };
    let a = run("first");
    let b = run("second");
    Outcome {
        pass: a == b,
        detail: format!(
            "two invocations, {} vs {} bytes, {}",
            a.len(),
            b.len(),
            if a == b { "identical" } else { "different" }
        ),
    }
}

fn criterion_statistics() -> Outcome {
    // two-sided 95% Student-t critical value for 19 degrees of freedom
    const T_975_19: f64 = 2.093_024_054_408_263;
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let values: Vec<f64> = (0..20).map(|_| rng.random_range(30.0..60.0)).collect();
    // Welford's running mean and variance
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &v) in values.iter().enumerate() {
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let half = T_975_19 * (m2 / 19.0).sqrt() / 20f64.sqrt();
    let got = aggregate_runs(&values, 0.95, CiMethod::StudentT).unwrap();
    let err = (got.mean - mean).abs().max((got.half_width.unwrap() - half).abs());
    let rendered = RunStats {
        mean: 47.4,
        half_width: Some(0.66),
        n: 20,
    }
    .render();
    Outcome {
        pass: err <= 1e-9 && rendered == "47.4±0.66" && got.n == 20,
        detail: format!(
            "20 samples, max |Δ| {err:.1e} ({} vs t-oracle); renders \"{rendered}\"",
            got.render()
        ),
    }
}

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    println!("acceptance criteria");
    let secs = Duration::from_secs;
    let mut results = vec![
        report(1, "loss oracles", Some(secs(10)), criterion_loss_oracles),
        report(2, "gradient checks", Some(secs(30)), criterion_gradients),
        report(3, "retrieval equivalence", Some(secs(10)), criterion_knn),
        report(4, "mIoU oracle", None, criterion_miou),
    ];
    let w = world();
    println!(
        "     shared base model trained in {:.1}s ({} images, {} epochs)",
        w.base_time.as_secs_f64(),
        w.data.splits.base.len(),
        w.cfg.train.epochs_base
    );
    results.push(report(5, "pseudo-labels beat FT+KD", Some(secs(600)), || {
        criterion_pl_beats_ftkd(&w)
    }));
    results.push(report(6, "forgetting control", None, || criterion_forgetting(&w)));
    results.push(report(7, "determinism", None, criterion_determinism));
    results.push(report(8, "statistics oracle", None, criterion_statistics));
    let passed = results.iter().filter(|p| **p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
