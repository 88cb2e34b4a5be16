use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{concat_inputs, Split, TaskSource};
use crate::error::{CsnError, Result};
use crate::learners::Episode;

/// `C`-way `k`-shot with `queries` query examples per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
}

/// Seed of episode `index` of a stream, so any episode can be regenerated
/// on its own (splitmix64 over the run seed, split and index).
pub fn episode_seed(run_seed: u64, split: Split, index: u64) -> u64 {
    let mut z = run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split.tag().wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `way` classes of `split` without replacement, assigns them episode
/// labels in random order, and draws `shot` description plus `queries`
/// query examples per class (distinct examples for finite datasets).
pub fn sample_episode(source: &TaskSource, split: Split, shape: EpisodeShape, rng: &mut impl Rng) -> Result<Episode> {
    let EpisodeShape { way, shot, queries } = shape;
    if way < 2 || shot == 0 || queries == 0 {
        return Err(CsnError::Sampler(format!(
            "episodes need way ≥ 2, shot ≥ 1 and queries ≥ 1 (got {way}-way {shot}-shot, {queries} queries)"
        )));
    }
    let pool = source.classes(split);
    if pool.len() < way {
        return Err(CsnError::Sampler(format!(
            "{split} split has {} classes, {way}-way episodes need {way} ({} short)",
            pool.len(),
            way - pool.len()
        )));
    }
    let class_ids: Vec<usize> = index::sample(rng, pool.len(), way).into_iter().map(|i| pool[i]).collect();
    let mut labels: Vec<usize> = (0..way).collect();
    labels.shuffle(rng);
    let mut support = Vec::with_capacity(way);
    let mut query = Vec::with_capacity(way);
    let mut support_y = Vec::with_capacity(way * shot);
    let mut query_y = Vec::with_capacity(way * queries);
    // class_ids[label] is the class behind episode label `label`
    let mut by_label = vec![0; way];
    for (&class, &label) in class_ids.iter().zip(&labels) {
        by_label[label] = class;
    }
    for (label, &class) in by_label.iter().enumerate() {
        let drawn = source.draw(class, shot + queries, rng)?;
        let first: Vec<usize> = (0..shot).collect();
        let rest: Vec<usize> = (shot..shot + queries).collect();
        support.push(drawn.select(&first));
        query.push(drawn.select(&rest));
        support_y.extend(std::iter::repeat(label).take(shot));
        query_y.extend(std::iter::repeat(label).take(queries));
    }
    Ok(Episode {
        support_x: concat_inputs(support)?,
        support_y,
        query_x: concat_inputs(query)?,
        query_y,
        way,
        shot,
        class_ids: by_label,
    })
}
