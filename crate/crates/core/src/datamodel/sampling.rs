use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Sample;
use super::label::ClassSet;
use crate::error::{Error, Result};

/// Few-shot training set D_t. Labels keep only the task's classes; every
/// other pixel is the ignore value.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSet {
    pub items: Vec<Sample>,
    pub task_index: usize,
    pub shots: usize,
}

impl FewShotSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Draws `shots` distinct images containing at least one pixel of
/// `class_set`, then re-masks them to `class_set`. Deterministic in `seed`.
pub fn sample_few_shot(
    split: &[Sample],
    class_set: &ClassSet,
    task_index: usize,
    shots: usize,
    seed: u64,
) -> Result<FewShotSet> {
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let eligible: Vec<&Sample> = split
        .iter()
        .filter(|s| s.labels.contains_any(class_set))
        .collect();
    if eligible.len() < shots {
        return Err(Error::Sampling {
            needed: shots,
            found: eligible.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, eligible.len(), shots).into_vec();
    picked.sort_unstable();
    let items = picked
        .into_iter()
        .map(|i| {
            let s = eligible[i];
            Sample {
                id: s.id.clone(),
                image: s.image.clone(),
                labels: s.labels.restrict_to(class_set),
            }
        })
        .collect();
    Ok(FewShotSet {
        items,
        task_index,
        shots,
    })
}
