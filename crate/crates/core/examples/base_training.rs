//! Train the base model on the first task and report its validation mIoU.

use fscil_seg::datamodel::{generate_splits, SplitSizes, SyntheticWorldSpec};
use fscil_seg::evaluation::{evaluate_model, TaskSelector};
use fscil_seg::trainer::{train_base, TrainConfig};

fn main() -> fscil_seg::Result<()> {
    env_logger::init();
    let spec = SyntheticWorldSpec::driving();
    let schedule = spec.default_schedule()?;
    let sizes = SplitSizes {
        base: 80,
        labeled: 0,
        unlabeled: 0,
        validation: 20,
    };
    let data = generate_splits(&spec, sizes, 1)?;
    let cfg = TrainConfig {
        epochs_base: 10,
        ..TrainConfig::default()
    };

    let (model, report) = train_base(&data.splits.base, &schedule, &cfg)?;
    println!("{} parameters, {} training images", model.num_params(), report.items);
    for e in &report.epochs {
        println!(
            "epoch {:>2}: running loss {:.4}, end-of-epoch loss {:.4}",
            e.epoch, e.running_loss, e.loss
        );
    }

    let metrics = evaluate_model(&model, &data.splits.validation, &schedule, &[TaskSelector::Task(1)])?;
    let t1 = &metrics.task_sets[0];
    println!("validation {} mIoU {:.1}", t1.label, 100.0 * t1.miou.unwrap_or(f64::NAN));
    for c in &t1.per_class {
        println!("  {:<10} {:.3}", c.name, c.iou.unwrap_or(f64::NAN));
    }
    Ok(())
}
