//! One incremental step: learn two new classes from five labeled images,
//! then retrain with pseudo-labels on retrieved pool images.
//!
//! Prints validation mIoU for the base model, the distillation-only model
//! and the final model.

use fscil_seg::datamodel::{generate_splits, sample_few_shot, SplitSizes, SyntheticWorldSpec};
use fscil_seg::evaluation::{evaluate_model, render_table, TaskSelector};
use fscil_seg::network::{GridEmbedder, SegmentationModel};
use fscil_seg::trainer::{run_incremental_step, train_base, TrainConfig};

fn main() -> fscil_seg::Result<()> {
    env_logger::init();
    let spec = SyntheticWorldSpec::driving();
    let schedule = spec.default_schedule()?;
    let sizes = SplitSizes {
        base: 100,
        labeled: 60,
        unlabeled: 120,
        validation: 30,
    };
    let data = generate_splits(&spec, sizes, 7)?;
    let cfg = TrainConfig {
        epochs_base: 15,
        ..TrainConfig::default()
    };

    let (base, _) = train_base(&data.splits.base, &schedule, &cfg)?;
    let fewshot = sample_few_shot(&data.splits.labeled, schedule.task(2)?, 2, 5, cfg.seed)?;
    let out = run_incremental_step(&base, &fewshot, &data.splits.pool, &schedule, &cfg, &GridEmbedder::default())?;

    let r = &out.report;
    let nb = r.neighborhood.as_ref().expect("pool is not empty");
    println!("few-shot images: {}", r.fewshot.join(", "));
    println!(
        "retrieved {} pool images (K = {}), pseudo-label coverage {:.1}%",
        nb.ids.len(),
        nb.k_used,
        100.0 * r.pseudo_coverage.unwrap_or(0.0)
    );

    let selectors = TaskSelector::parse_list("1,2,union", 2)?;
    let mut rows = Vec::new();
    let models: [(&str, &SegmentationModel); 3] = [("base", &base), ("FT+KD", &out.initial), ("FT+KD+PL", &out.model)];
    for (name, model) in models {
        // the base model has no outputs for the new classes
        let sel = if model.class_count() < schedule.class_names().len() { &selectors[..1] } else { &selectors[..] };
        let m = evaluate_model(model, &data.splits.validation, &schedule, sel)?;
        let mut row = vec![name.to_string()];
        for s in &selectors {
            row.push(m.miou(s).map_or("-".into(), |v| format!("{:.1}", 100.0 * v)));
        }
        rows.push(row);
    }
    let mut header = vec!["model".to_string()];
    header.extend(selectors.iter().map(|s| s.label()));
    print!("{}", render_table(&header, &rows));
    Ok(())
}
