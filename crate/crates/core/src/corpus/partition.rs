//! Subtask partitions: disjoint shards plus a controllable overlap ratio.
//!
//! The corpus indices are shuffled once and cut into `n` near-equal disjoint
//! shards. Subset `k` is its shard plus `round(r · |rest|)` indices sampled
//! without replacement from the complement, so `r = 0` reproduces the shards
//! and `r = 1` hands every student the full corpus.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SubtaskPartition {
    /// Disjoint shards covering `0..m` exactly (sorted ascending).
    pub shards: Vec<Vec<usize>>,
    /// Per-student subsets: shard ∪ overlap sample (sorted ascending).
    pub subsets: Vec<Vec<usize>>,
    pub overlap: f64,
    pub corpus_len: usize,
}

/// Split `m` corpus indices into `n` subsets with overlap ratio `overlap`.
pub fn partition(
    m: usize,
    n: usize,
    overlap: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SubtaskPartition> {
    if n < 2 {
        return Err(Error::config(format!("partition needs at least 2 subsets, got {n}")));
    }
    if m < n {
        return Err(Error::config(format!(
            "cannot split {m} pairs into {n} non-empty subsets"
        )));
    }
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::config(format!("overlap ratio {overlap} outside [0, 1]")));
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);

    // First `m % n` shards take the extra element, so sizes differ by ≤ 1.
    let base = m / n;
    let extra = m % n;
    let mut shards = Vec::with_capacity(n);
    let mut cursor = 0;
    for k in 0..n {
        let size = base + usize::from(k < extra);
        let mut shard: Vec<usize> = order[cursor..cursor + size].to_vec();
        shard.sort_unstable();
        shards.push(shard);
        cursor += size;
    }

    let mut subsets = Vec::with_capacity(n);
    for shard in &shards {
        let rest: Vec<usize> = {
            let mut in_shard = vec![false; m];
            for &i in shard {
                in_shard[i] = true;
            }
            (0..m).filter(|&i| !in_shard[i]).collect()
        };
        let take = (overlap * rest.len() as f64).round() as usize;
        let sampled = rand::seq::index::sample(rng, rest.len(), take);
        let mut subset = shard.clone();
        subset.extend(sampled.iter().map(|j| rest[j]));
        subset.sort_unstable();
        subsets.push(subset);
    }

    Ok(SubtaskPartition {
        shards,
        subsets,
        overlap,
        corpus_len: m,
    })
}

impl SubtaskPartition {
    pub fn n(&self) -> usize {
        self.subsets.len()
    }

    /// Verify the partition laws; used by tests and the partition-heavy suites.
    pub fn check_laws(&self) -> Result<()> {
        let m = self.corpus_len;
        let n = self.shards.len();
        let mut seen = vec![0usize; m];
        for shard in &self.shards {
            for &i in shard {
                if i >= m {
                    return Err(Error::config(format!("shard index {i} out of range {m}")));
                }
                seen[i] += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::config("shards are not a disjoint cover"));
        }
        let min = self.shards.iter().map(Vec::len).min().unwrap_or(0);
        let max = self.shards.iter().map(Vec::len).max().unwrap_or(0);
        if max - min > 1 {
            return Err(Error::config(format!(
                "shard sizes unbalanced: min {min}, max {max}"
            )));
        }
        for (shard, subset) in self.shards.iter().zip(&self.subsets) {
            let expect = shard.len() + (self.overlap * (m - shard.len()) as f64).round() as usize;
            if subset.len() != expect {
                return Err(Error::config(format!(
                    "subset size {} != shard {} + round(r·rest) {}",
                    subset.len(),
                    shard.len(),
                    expect
                )));
            }
            // Every shard index must be present in its subset.
            let mut in_subset = vec![false; m];
            for &i in subset {
                in_subset[i] = true;
            }
            if shard.iter().any(|&i| !in_subset[i]) {
                return Err(Error::config("subset does not contain its own shard"));
            }
            // Subsets hold no duplicates.
            if subset.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::config("subset contains duplicate indices"));
            }
        }
        let _ = n;
        Ok(())
    }
}
