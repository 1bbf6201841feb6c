//! Pseudo-label retrieved pool images with a model that has just learned the
//! new classes, and measure label quality against the hidden ground truth at
//! several confidence thresholds.

use fscil_seg::datamodel::{generate_splits, sample_few_shot, SplitSizes, SyntheticWorldSpec};
use fscil_seg::pseudolabel::{infer_pseudo_labels, pseudo_label_quality_report, PseudoLabelMode};
use fscil_seg::trainer::{train_base, train_increment_initial, TrainConfig};

fn main() -> fscil_seg::Result<()> {
    env_logger::init();
    let spec = SyntheticWorldSpec::driving();
    let schedule = spec.default_schedule()?;
    let sizes = SplitSizes {
        base: 60,
        labeled: 40,
        unlabeled: 60,
        validation: 0,
    };
    let data = generate_splits(&spec, sizes, 5)?;
    let cfg = TrainConfig {
        epochs_base: 10,
        ..TrainConfig::default()
    };
    let (base, _) = train_base(&data.splits.base, &schedule, &cfg)?;
    let fewshot = sample_few_shot(&data.splits.labeled, schedule.task(2)?, 2, 5, 0)?;
    let (model, _) = train_increment_initial(&base, &fewshot, &schedule, &cfg)?;

    let novel = schedule.task(2)?;
    let ids = data.splits.pool.ids();
    println!("{:>5} {:>9}  per-class precision / recall", "tau", "coverage");
    for tau in [0.0, 0.3, 0.5, 0.7, 0.9] {
        let set = infer_pseudo_labels(&model, &data.splits.pool, &ids, novel, tau, PseudoLabelMode::Hard, 2)?;
        let q = pseudo_label_quality_report(&set, novel, Some(&data.pool_labels))?;
        let per_class: Vec<String> = q
            .classes
            .iter()
            .map(|c| {
                let pct = |v: Option<f64>| v.map_or("-".into(), |v| format!("{:.0}%", 100.0 * v));
                format!("{} {} / {}", schedule.class_name(c.class), pct(c.precision), pct(c.recall))
            })
            .collect();
        println!("{tau:>5.1} {:>8.1}%  {}", 100.0 * q.coverage, per_class.join(", "));
    }
    Ok(())
}
