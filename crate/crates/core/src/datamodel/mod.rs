//! Dataset structures: images, label maps, the task schedule, few-shot
//! sampling and the synthetic driving-scene world used for desk-scale runs.

mod dataset;
mod label;
mod sampling;
mod schedule;
pub mod synth;

pub use dataset::{
    load_dataset, read_image_png, read_label_png, write_image_png, write_label_png, DatasetSplits,
    Manifest, PoolItem, Sample, UnlabeledPool,
};
pub use label::{ClassId, ClassSet, Image, LabelMap, IGNORE_VALUE};
pub use sampling::{sample_few_shot, FewShotSet};
pub use schedule::{build_task_schedule, ScheduleConfig, TaskConfig, TaskSchedule};
pub use synth::{
    generate_scene_in_archetype, generate_splits, generate_synthetic_scene, SplitSizes,
    SyntheticDataset, SyntheticScene, SyntheticWorldSpec,
};
