use fscil_seg::datamodel::{
    generate_splits, sample_few_shot, FewShotSet, SplitSizes, SyntheticDataset, SyntheticWorldSpec,
    TaskSchedule, UnlabeledPool,
};
use fscil_seg::losses::TermWeights;
use fscil_seg::network::{ArchConfig, GridEmbedder, SegmentationModel};
use fscil_seg::pseudolabel::assemble_augmented_set;
use fscil_seg::trainer::{
    evaluate_objective, model_hash, run_experiment, run_incremental_step, train_base,
    train_increment_initial, ExperimentConfig, RetrainInit, TrainConfig,
};
use fscil_seg::Error;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        arch: ArchConfig {
            widths: vec![8, 8],
            ..ArchConfig::default()
        },
        epochs_base: 2,
        epochs_phase1: 2,
        epochs_phase2: 2,
        k_neighbors: 3,
        tau: 0.0,
        ..TrainConfig::default()
    }
}

fn tiny_world() -> (TaskSchedule, SyntheticDataset) {
    let spec = SyntheticWorldSpec::driving();
    let sizes = SplitSizes {
        base: 12,
        labeled: 20,
        unlabeled: 15,
        validation: 6,
    };
    (spec.default_schedule().unwrap(), generate_splits(&spec, sizes, 5).unwrap())
}

fn base_and_fewshot(cfg: &TrainConfig, shots: usize) -> (TaskSchedule, SyntheticDataset, SegmentationModel, FewShotSet) {
    let (schedule, data) = tiny_world();
    let (base, _) = train_base(&data.splits.base, &schedule, cfg).unwrap();
    let fewshot = sample_few_shot(&data.splits.labeled, schedule.task(2).unwrap(), 2, shots, 1).unwrap();
    (schedule, data, base, fewshot)
}

#[test]
fn base_loss_decreases_over_first_five_epochs() {
    let spec = SyntheticWorldSpec::driving();
    let sizes = SplitSizes {
        base: 200,
        labeled: 0,
        unlabeled: 0,
        validation: 0,
    };
    let data = generate_splits(&spec, sizes, 11).unwrap();
    let cfg = TrainConfig {
        epochs_base: 5,
        ..TrainConfig::default()
    };
    let (_, report) = train_base(&data.splits.base, &spec.default_schedule().unwrap(), &cfg).unwrap();
    // running loss: the aggregate over every minibatch seen in the epoch
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.running_loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert_eq!(
        report.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(),
        vec![1, 2, 3, 4, 5]
    );
}

#[test]
fn base_training_is_deterministic() {
    let (schedule, data) = tiny_world();
    let cfg = tiny_config();
    let (a, ra) = train_base(&data.splits.base, &schedule, &cfg).unwrap();
    let (b, rb) = train_base(&data.splits.base, &schedule, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(a.class_count(), 3);
    assert_eq!(a.step(), 1);
}

#[test]
fn empty_base_set_is_rejected() {
    let (schedule, _) = tiny_world();
    assert!(matches!(
        train_base(&[], &schedule, &tiny_config()),
        Err(Error::Usage(_))
    ));
}

#[test]
fn logged_loss_matches_offline_recomputation() {
    let cfg = tiny_config();
    let (schedule, _, base, fewshot) = base_and_fewshot(&cfg, 3);
    let (model, report) = train_increment_initial(&base, &fewshot, &schedule, &cfg).unwrap();
    let items = assemble_augmented_set(&fewshot, &fscil_seg::pseudolabel::PseudoLabeledSet::empty(2, 0.0)).unwrap();
    let values = evaluate_objective(&model, Some(&base), &items, &schedule, 2, &cfg.effective_weights()).unwrap();
    let mean = values.iter().map(|v| v.0).sum::<f64>() / values.len() as f64;
    let logged = report.epochs.last().unwrap().loss;
    assert!((mean - logged).abs() <= 1e-6, "{mean} vs {logged}");
}

#[test]
fn one_shot_step_runs_and_teacher_stays_frozen() {
    let cfg = tiny_config();
    let (schedule, data, base, fewshot) = base_and_fewshot(&cfg, 1);
    assert_eq!(fewshot.len(), 1);
    let before = model_hash(&base);
    let probe = base.forward(&data.splits.validation[0].image).unwrap();
    let out = run_incremental_step(&base, &fewshot, &data.splits.pool, &schedule, &cfg, &GridEmbedder::default())
        .unwrap();
    assert_eq!(model_hash(&base), before);
    assert_eq!(base.forward(&data.splits.validation[0].image).unwrap(), probe);
    assert_eq!(out.report.teacher_hash, before);
    assert_eq!(out.model.class_count(), 5);
    assert_eq!(out.model.step(), 2);
    assert!(!out.report.degraded);
}

#[test]
fn neighbourhood_is_bounded_by_k_times_shots() {
    let cfg = tiny_config();
    let (schedule, data, base, fewshot) = base_and_fewshot(&cfg, 3);
    let out = run_incremental_step(&base, &fewshot, &data.splits.pool, &schedule, &cfg, &GridEmbedder::default())
        .unwrap();
    let nb = out.report.neighborhood.as_ref().unwrap();
    assert!(nb.ids.len() <= cfg.k_neighbors * fewshot.len());
    assert!(nb.ids.len() >= cfg.k_neighbors);
    assert_eq!(out.report.pseudo_items, nb.ids.len());
    assert_eq!(out.pseudo.len(), nb.ids.len());
}

#[test]
fn kd_multiplier_zero_equals_kd_switch_off() {
    let cfg = tiny_config();
    let (schedule, _, base, fewshot) = base_and_fewshot(&cfg, 2);
    let zero = TrainConfig {
        weights: TermWeights {
            kd: 0.0,
            ..TermWeights::default()
        },
        ..cfg.clone()
    };
    let off = TrainConfig {
        use_kd: false,
        ..cfg.clone()
    };
    let (a, _) = train_increment_initial(&base, &fewshot, &schedule, &zero).unwrap();
    let (b, _) = train_increment_initial(&base, &fewshot, &schedule, &off).unwrap();
    assert_eq!(a, b);
    let (c, _) = train_increment_initial(&base, &fewshot, &schedule, &cfg).unwrap();
    assert_ne!(a, c);
}

#[test]
fn zero_pseudo_weight_and_no_phase2_epochs_returns_phase1_model() {
    let cfg = TrainConfig {
        weights: TermWeights {
            pseudo_ce: 0.0,
            ..TermWeights::default()
        },
        epochs_phase2: 0,
        retrain_init: RetrainInit::Initial,
        ..tiny_config()
    };
    let (schedule, data, base, fewshot) = base_and_fewshot(&cfg, 2);
    let out = run_incremental_step(&base, &fewshot, &data.splits.pool, &schedule, &cfg, &GridEmbedder::default())
        .unwrap();
    assert_eq!(out.model, out.initial);
    assert_eq!(out.report.final_hash, out.report.initial_hash);
}

#[test]
fn empty_pool_degrades_to_phase1_model() {
    let cfg = tiny_config();
    let (schedule, _, base, fewshot) = base_and_fewshot(&cfg, 2);
    let out = run_incremental_step(&base, &fewshot, &UnlabeledPool::new(), &schedule, &cfg, &GridEmbedder::default())
        .unwrap();
    assert!(out.report.degraded);
    assert!(out.report.phase2.is_none());
    assert_eq!(out.model, out.initial);
    let (ftkd, _) = train_increment_initial(&base, &fewshot, &schedule, &cfg).unwrap();
    assert_eq!(out.model, ftkd);
}

#[test]
fn no_pl_returns_phase1_model() {
    let cfg = TrainConfig {
        use_pl: false,
        ..tiny_config()
    };
    let (schedule, data, base, fewshot) = base_and_fewshot(&cfg, 2);
    let out = run_incremental_step(&base, &fewshot, &data.splits.pool, &schedule, &cfg, &GridEmbedder::default())
        .unwrap();
    assert!(!out.report.degraded);
    assert_eq!(out.model, out.initial);
}

#[test]
fn schedule_position_mismatch_is_rejected() {
    let cfg = tiny_config();
    let (schedule, data, base, _) = base_and_fewshot(&cfg, 2);
    let wrong = sample_few_shot(&data.splits.labeled, schedule.task(1).unwrap(), 1, 2, 1).unwrap();
    assert!(matches!(
        train_increment_initial(&base, &wrong, &schedule, &cfg),
        Err(Error::Usage(_))
    ));
    let fewshot = sample_few_shot(&data.splits.labeled, schedule.task(2).unwrap(), 2, 2, 1).unwrap();
    let (m2, _) = train_increment_initial(&base, &fewshot, &schedule, &cfg).unwrap();
    // a step-2 model cannot serve as the teacher of step 2
    assert!(train_increment_initial(&m2, &fewshot, &schedule, &cfg).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let (schedule, data) = tiny_world();
    for cfg in [
        TrainConfig { lr: 0.0, ..tiny_config() },
        TrainConfig { batch_size: 0, ..tiny_config() },
        TrainConfig { tau: 1.0, ..tiny_config() },
        TrainConfig { k_neighbors: 0, ..tiny_config() },
        TrainConfig { epochs_base: 0, ..tiny_config() },
    ] {
        assert!(matches!(
            train_base(&data.splits.base, &schedule, &cfg),
            Err(Error::Config(_))
        ));
    }
}

#[test]
fn single_run_experiment_has_no_interval_and_is_reproducible() {
    let (schedule, data) = tiny_world();
    let cfg = ExperimentConfig {
        train: tiny_config(),
        shots: 2,
        runs: 1,
        ..ExperimentConfig::default()
    };
    let a = run_experiment(&schedule, &data.splits, &cfg, &GridEmbedder::default()).unwrap();
    assert!(a.rows.iter().all(|r| r.stats.is_none_or(|s| s.half_width.is_none())));
    assert_eq!(a.runs.len(), 1);
    assert!(a.runs[0].error.is_none());
    let b = run_experiment(&schedule, &data.splits, &cfg, &GridEmbedder::default()).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let table = a.render_table();
    assert!(table.contains("FT+KD+PL"));
    assert!(table.contains("T1∪2"));
}

#[test]
fn failing_run_is_recorded_without_aborting() {
    let (schedule, data) = tiny_world();
    // more shots than eligible images: every run fails at sampling
    let cfg = ExperimentConfig {
        train: tiny_config(),
        shots: 1000,
        runs: 2,
        ..ExperimentConfig::default()
    };
    let r = run_experiment(&schedule, &data.splits, &cfg, &GridEmbedder::default()).unwrap();
    assert_eq!(r.runs.len(), 2);
    assert!(r.runs.iter().all(|run| run.error.as_deref().is_some_and(|e| e.contains("sampling"))));
    assert!(r.rows.iter().all(|row| row.stats.is_none()));
}
