//! Confusion-matrix bookkeeping, per-task mIoU and run aggregation.

use fscil_seg::datamodel::{ClassSet, LabelMap, IGNORE_VALUE};
use fscil_seg::evaluation::{aggregate_runs, predict_restricted, CiMethod, ConfusionMatrix};
use fscil_seg::network::ProbMap;

fn main() -> fscil_seg::Result<()> {
    let all = ClassSet::new([0, 1]);
    let mut cm = ConfusionMatrix::new(all.clone());
    cm.accumulate(
        &LabelMap::new(1, 4, vec![0, 0, 1, 1])?,
        &LabelMap::new(1, 4, vec![0, 1, 1, 1])?,
    )?;
    println!("IoU(0) = {:?}, IoU(1) = {:?}", cm.iou(0), cm.iou(1));
    println!("mIoU = {:.6} (7/12 = {:.6})", cm.miou(&all)?, 7.0 / 12.0);

    // shards accumulated separately and merged agree with a single pass
    let mut shard = ConfusionMatrix::new(all.clone());
    shard.accumulate(&LabelMap::new(1, 2, vec![1, 0])?, &LabelMap::new(1, 2, vec![1, IGNORE_VALUE])?)?;
    let mut merged = cm.clone();
    merged.merge(&shard)?;
    println!("after merging a shard: {} pixels, mIoU {:.4}", merged.total(), merged.miou(&all)?);

    // restricted argmax: a pixel is assigned the best class within the set
    let probs = ProbMap::from_probs(1, 2, 3, vec![0.5, 0.2, 0.3, 0.1, 0.3, 0.6])?;
    let full = predict_restricted(&probs, &ClassSet::new([0, 1, 2]))?;
    let old = predict_restricted(&probs, &ClassSet::new([0, 1]))?;
    println!("argmax over all classes {:?}, over old classes {:?}", full.values(), old.values());

    let runs = [47.1, 47.9, 46.8, 47.6, 47.5];
    let t = aggregate_runs(&runs, 0.95, CiMethod::StudentT)?;
    let z = aggregate_runs(&runs, 0.95, CiMethod::Normal)?;
    println!("five runs: {} (Student-t), {} (normal)", t.render(), z.render());
    Ok(())
}
