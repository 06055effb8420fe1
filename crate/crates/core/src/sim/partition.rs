use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::SimError;
use crate::filters::HashSeed;
use crate::model::Dataset;

/// Splits `data` over `clients` shards: for each class, the share of every
/// client is drawn from `Dir(a · 1)`. Shards are disjoint and cover the
/// dataset; an empty shard takes one example from the largest shard.
pub fn partition_dirichlet(
    data: &Dataset,
    clients: usize,
    a: f64,
    seed: HashSeed,
) -> Result<Vec<Dataset>, SimError> {
    let shards = partition_indices(data, clients, a, seed)?;
    Ok(shards.iter().map(|idx| data.subset(idx)).collect())
}

/// Index form of [`partition_dirichlet`].
pub fn partition_indices(
    data: &Dataset,
    clients: usize,
    a: f64,
    seed: HashSeed,
) -> Result<Vec<Vec<usize>>, SimError> {
    if clients == 0 {
        return Err(SimError::Config(super::ConfigError {
            key: "federation.clients".into(),
            message: "must be at least 1".into(),
        }));
    }
    if !(a.is_finite() && a > 0.0) {
        return Err(SimError::Config(super::ConfigError {
            key: "federation.dirichlet".into(),
            message: format!("must be positive, got {a}"),
        }));
    }
    if data.len() < clients {
        return Err(SimError::TooFewSamples {
            samples: data.len(),
            clients,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.value());
    let gamma = Gamma::new(a, 1.0).expect("shape checked positive");
    let mut shards = vec![Vec::new(); clients];
    for class in 0..data.classes() {
        let mut members: Vec<usize> = (0..data.len())
            .filter(|&i| data.label(i) as usize == class)
            .collect();
        members.shuffle(&mut rng);
        let mut weights: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = weights.iter().sum();
        if total > 0.0 && total.is_finite() {
            weights.iter_mut().for_each(|w| *w /= total);
        } else {
            // Every draw underflowed: give the class to one client.
            weights.iter_mut().for_each(|w| *w = 0.0);
            weights[class % clients] = 1.0;
        }
        // Cumulative rounding keeps the counts summing to the class size.
        let n = members.len() as f64;
        let mut cum = 0.0;
        let mut start = 0;
        for (c, w) in weights.iter().enumerate() {
            cum += w;
            let end = if c + 1 == clients {
                members.len()
            } else {
                ((cum * n).round() as usize).clamp(start, members.len())
            };
            shards[c].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let donor = (0..clients)
            .max_by_key(|&c| (shards[c].len(), std::cmp::Reverse(c)))
            .unwrap();
        let moved = shards[donor].pop().unwrap();
        shards[empty].push(moved);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Mean fraction of classes present per shard.
pub fn class_coverage(shards: &[Dataset]) -> f64 {
    if shards.is_empty() {
        return 0.0;
    }
    shards
        .iter()
        .map(|s| s.class_counts().iter().filter(|&&c| c > 0).count() as f64 / s.classes() as f64)
        .sum::<f64>()
        / shards.len() as f64
}
