use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Assignment, DatasetManifest, Role, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitReport {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub val_queries: usize,
    pub test_queries: usize,
    /// `(attribute, value)` pairs with no training image.
    pub missing_in_train: Vec<(usize, usize)>,
}

impl std::fmt::Display for SplitReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "train {} / val {} ({} queries, {} candidates) / test {} ({} queries, {} candidates)",
            self.train,
            self.val,
            self.val_queries,
            self.val - self.val_queries,
            self.test,
            self.test_queries,
            self.test - self.test_queries
        )
    }
}

/// Shuffles images into train/val/test by `ratios`, then marks the first
/// `round(query_fraction * n)` images of val and of test as queries.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: [f64; 3],
    query_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, SplitReport)> {
    if ratios.iter().any(|&r| !r.is_finite() || r <= 0.0) {
        return Err(Error::Spec(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    if !(0.0..=1.0).contains(&query_fraction) {
        return Err(Error::Spec(format!(
            "query fraction {query_fraction} outside [0, 1]"
        )));
    }
    let total: f64 = ratios.iter().sum();
    let n = manifest.len();
    let n_train = (n as f64 * ratios[0] / total).round() as usize;
    let n_val = ((n as f64 * ratios[1] / total).round() as usize).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut assignments = vec![
        Assignment {
            split: Split::Train,
            role: None,
        };
        n
    ];
    let groups = [
        (Split::Val, &order[n_train..n_train + n_val]),
        (Split::Test, &order[n_train + n_val..]),
    ];
    let mut queries = [0usize; 2];
    for (k, (split, members)) in groups.iter().enumerate() {
        let n_query = (members.len() as f64 * query_fraction).round() as usize;
        queries[k] = n_query;
        for (pos, &i) in members.iter().enumerate() {
            assignments[i] = Assignment {
                split: *split,
                role: Some(if pos < n_query {
                    Role::Query
                } else {
                    Role::Candidate
                }),
            };
        }
    }

    let mut missing = Vec::new();
    for a in 0..manifest.vocabulary.len() {
        for v in 0..manifest.vocabulary.value_count(a) {
            let present = order[..n_train]
                .iter()
                .any(|&i| manifest.value(i, a) == Some(v));
            if !present {
                missing.push((a, v));
            }
        }
    }
    if !missing.is_empty() {
        log::warn!(
            "split leaves {} attribute value(s) without training images: {:?}",
            missing.len(),
            missing
        );
    }

    let report = SplitReport {
        train: n_train,
        val: n_val,
        test: n - n_train - n_val,
        val_queries: queries[0],
        test_queries: queries[1],
        missing_in_train: missing,
    };
    let out = DatasetManifest {
        assignments: Some(assignments),
        ratios: Some(ratios),
        query_fraction: Some(query_fraction),
        ..manifest.clone()
    };
    Ok((out, report))
}
