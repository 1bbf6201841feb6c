//! Retrieve pool images whose scene layout resembles the few-shot images.
//!
//! Each few-shot image queries the unlabeled pool by cosine distance between
//! scene embeddings. Because synthetic scenes come from known archetypes, we
//! can report how often a neighbour shares its query's archetype.

use fscil_seg::datamodel::{generate_splits, sample_few_shot, SplitSizes, SyntheticWorldSpec};
use fscil_seg::network::GridEmbedder;
use fscil_seg::retrieval::{embed_set, knn_neighborhoods, pairwise_cosine_distance};

fn main() -> fscil_seg::Result<()> {
    let spec = SyntheticWorldSpec::driving();
    let schedule = spec.default_schedule()?;
    let sizes = SplitSizes {
        base: 0,
        labeled: 40,
        unlabeled: 200,
        validation: 0,
    };
    let data = generate_splits(&spec, sizes, 3)?;
    let fewshot = sample_few_shot(&data.splits.labeled, schedule.task(2)?, 2, 5, 11)?;

    let embedder = GridEmbedder::default();
    let queries: Vec<(u32, _)> = fewshot.items.iter().enumerate().map(|(i, s)| (i as u32, &s.image)).collect();
    let pool: Vec<(u32, _)> = data.splits.pool.items().iter().map(|p| (p.id, &p.image)).collect();
    let f = embed_set(&embedder, &queries)?;
    let g = embed_set(&embedder, &pool)?;
    let d = pairwise_cosine_distance(&f, &g)?;
    let nb = knn_neighborhoods(&d, 10)?;

    let archetype_of = |stem: &str| data.manifest.archetypes[stem];
    let (mut same, mut total) = (0, 0);
    for (sample, ids) in fewshot.items.iter().zip(&nb.per_query) {
        let a = archetype_of(&sample.id);
        let hits = ids
            .iter()
            .filter(|&&id| archetype_of(&data.splits.pool.get(id).unwrap().stem) == a)
            .count();
        println!("{} (archetype {a}): {hits}/{} neighbours share it", sample.id, ids.len());
        same += hits;
        total += ids.len();
    }
    println!(
        "union of neighbourhoods: {} of {} pool images; archetype agreement {:.0}% (chance ≈ 25%)",
        nb.union.len(),
        data.splits.pool.len(),
        100.0 * same as f64 / total as f64
    );
    Ok(())
}
