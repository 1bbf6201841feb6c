//! Generate a small synthetic driving world and summarize its splits.
//!
//! ```text
//! cargo run --example synthetic_world -- [seed]
//! ```

use std::collections::BTreeMap;

use fscil_seg::datamodel::{generate_splits, SplitSizes, SyntheticWorldSpec, IGNORE_VALUE};

fn main() -> fscil_seg::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let spec = SyntheticWorldSpec::driving();
    let schedule = spec.default_schedule()?;
    let sizes = SplitSizes {
        base: 40,
        labeled: 20,
        unlabeled: 40,
        validation: 10,
    };
    let data = generate_splits(&spec, sizes, seed)?;

    println!("world {}x{}, {} classes", spec.height, spec.width, schedule.class_names().len());
    for t in 1..=schedule.num_tasks() {
        let names: Vec<&str> = schedule.task(t)?.ids().iter().map(|&c| schedule.class_name(c)).collect();
        println!("  task {t}: {}", names.join(", "));
    }

    let splits = [
        ("base", &data.splits.base),
        ("labeled", &data.splits.labeled),
        ("validation", &data.splits.validation),
    ];
    for (name, samples) in splits {
        let mut pixels: BTreeMap<&str, usize> = BTreeMap::new();
        for s in samples.iter() {
            for &v in s.labels.values() {
                if v != IGNORE_VALUE {
                    *pixels.entry(schedule.class_name(v)).or_default() += 1;
                }
            }
        }
        println!("{name:>10}: {} images, pixels per class {pixels:?}", samples.len());
    }

    let mut archetypes: BTreeMap<usize, usize> = BTreeMap::new();
    for a in data.manifest.archetypes.values() {
        *archetypes.entry(*a).or_default() += 1;
    }
    println!("      pool: {} unlabeled images", data.splits.pool.len());
    println!("archetype counts over all scenes: {archetypes:?}");
    Ok(())
}
