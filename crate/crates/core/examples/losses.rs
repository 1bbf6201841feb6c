//! Evaluate the masked cross-entropy, the distillation term and the combined
//! objective on a tiny hand-built example.

use fscil_seg::datamodel::{build_task_schedule, LabelMap, ScheduleConfig, IGNORE_VALUE};
use fscil_seg::losses::{
    distillation_loss, masked_cross_entropy, total_objective, SampleSource, Target, TermWeights,
};
use fscil_seg::network::ProbMap;

fn main() -> fscil_seg::Result<()> {
    // two old classes (road, sky) and one new class (car)
    let schedule = build_task_schedule(&ScheduleConfig::from_lists(&[&["road", "sky"], &["car"]]))?;
    let old = schedule.task(1)?.clone();
    let new = schedule.task(2)?.clone();

    // a 1x3 image: a car pixel, an unlabeled pixel and a road pixel
    let labels = LabelMap::new(1, 3, vec![2, IGNORE_VALUE, 0])?;
    let student = ProbMap::from_probs(1, 3, 3, vec![
        0.1, 0.1, 0.8, //
        0.3, 0.5, 0.2, //
        0.6, 0.2, 0.2,
    ])?;
    let teacher = ProbMap::from_probs(1, 3, 2, vec![
        0.5, 0.5, //
        0.2, 0.8, //
        0.9, 0.1,
    ])?;

    let ce = masked_cross_entropy(&student, &labels, &new)?;
    println!("cross-entropy over car pixels: {:.5} (-ln 0.8 = {:.5})", ce.value, -(0.8f64).ln());

    let kd = distillation_loss(&student, &teacher, &labels, &new, &old)?;
    println!("distillation over the other two pixels: {:.5}", kd.value);

    let target = Target::Hard(labels.restrict_to(&new));
    let weights = TermWeights::default();
    for source in [SampleSource::FewShot, SampleSource::Pseudo] {
        let obj = total_objective(&student, Some(&teacher), &target, source, &schedule, 2, &weights)?;
        println!(
            "{source:?}: weighted total {:.5} (ce {:.5}, kd {:.5})",
            obj.total, obj.ce, obj.kd
        );
    }

    println!("gradient w.r.t. the car pixel logits: {:?}", &ce.grad[..3]);
    Ok(())
}
