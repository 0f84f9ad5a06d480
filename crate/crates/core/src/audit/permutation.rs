//! One-sided permutation test over paired observations.
//!
//! The right-hand column is permuted against the left and the mean pairing
//! statistic is recomputed. Sampled mode draws every permutation from a
//! seeded ChaCha stream before any statistic is evaluated, so the result is
//! identical however the evaluation is scheduled. For tiny inputs every
//! pairing can be enumerated instead, which gives the exact p-value.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationMode {
    Sampled,
    Exhaustive,
    /// Exhaustive when `k!` does not exceed the requested permutation count.
    #[default]
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationOutcome {
    pub observed: f64,
    /// Mean of the permutation means.
    pub baseline: f64,
    pub p_value: f64,
    /// Number of permutations evaluated.
    pub permutations: usize,
    pub exhaustive: bool,
    /// Every permutation reproduced the observed mean, so the data carry no
    /// pairing signal.
    pub degenerate: bool,
    pub seed: u64,
}

fn tolerance(observed: f64) -> f64 {
    1e-12 * observed.abs().max(1.0)
}

fn mean_of<F>(perm: &[usize], stat: &F) -> f64
where
    F: Fn(usize, usize) -> f64,
{
    perm.iter().enumerate().map(|(i, &j)| stat(i, j)).sum::<f64>() / perm.len() as f64
}

/// Runs the test for `k` pairs, where `stat(i, j)` scores left item `i`
/// against right item `j`.
///
/// Sampled p-values are add-one smoothed, `(1 + #{perm >= observed}) / (n + 1)`.
/// Exhaustive p-values are the exact share of all `k!` pairings (identity
/// included) whose mean reaches the observed one.
pub fn permutation_test<F>(k: usize, stat: F, n: usize, seed: u64, mode: PermutationMode) -> Result<PermutationOutcome>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    if k < 2 {
        return Err(Error::Invalid(format!("permutation test needs at least 2 pairs, got {k}")));
    }
    if n < 1 {
        return Err(Error::Invalid("permutation count must be at least 1".into()));
    }
    let identity: Vec<usize> = (0..k).collect();
    let observed = mean_of(&identity, &stat);
    let tol = tolerance(observed);

    let exhaustive = match mode {
        PermutationMode::Exhaustive => true,
        PermutationMode::Sampled => false,
        PermutationMode::Auto => factorial_at_most(k, n),
    };

    let means: Vec<f64> = if exhaustive {
        all_permutations(k).par_iter().map(|p| mean_of(p, &stat)).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perms: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let mut p = identity.clone();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        perms.par_iter().map(|p| mean_of(p, &stat)).collect()
    };

    let reached = means.iter().filter(|&&m| m >= observed - tol).count();
    let degenerate = means.iter().all(|m| (m - observed).abs() <= tol);
    // A degenerate baseline is the observed mean up to summation noise.
    let baseline = if degenerate { observed } else { means.iter().sum::<f64>() / means.len() as f64 };
    let p_value = if degenerate {
        1.0
    } else if exhaustive {
        reached as f64 / means.len() as f64
    } else {
        (1 + reached) as f64 / (n + 1) as f64
    };
    Ok(PermutationOutcome { observed, baseline, p_value, permutations: means.len(), exhaustive, degenerate, seed })
}

fn factorial_at_most(k: usize, n: usize) -> bool {
    let mut f: usize = 1;
    for i in 2..=k {
        f = match f.checked_mul(i) {
            Some(v) => v,
            None => return false,
        };
        if f > n {
            return false;
        }
    }
    true
}

/// All permutations of `0..k` in lexicographic order.
fn all_permutations(k: usize) -> Vec<Vec<usize>> {
    let mut cur: Vec<usize> = (0..k).collect();
    let mut out = vec![cur.clone()];
    loop {
        let Some(i) = (0..k - 1).rev().find(|&i| cur[i] < cur[i + 1]) else {
            return out;
        };
        let j = (i + 1..k).rev().find(|&j| cur[j] > cur[i]).expect("successor exists");
        cur.swap(i, j);
        cur[i + 1..].reverse();
        out.push(cur.clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerates_every_permutation_once() {
        let perms = all_permutations(4);
        assert_eq!(perms.len(), 24);
        let mut sorted = perms.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 24);
    }

    #[test]
    fn rejects_tiny_inputs() {
        assert!(permutation_test(1, |_, _| 0.0, 10, 1, PermutationMode::Sampled).is_err());
        assert!(permutation_test(3, |_, _| 0.0, 0, 1, PermutationMode::Sampled).is_err());
    }

    #[test]
    fn exchangeable_data_is_degenerate() {
        let out = permutation_test(5, |_, _| 0.3, 50, 9, PermutationMode::Sampled).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.p_value, 1.0);
        assert_eq!(out.observed, out.baseline);
    }

    #[test]
    fn perfect_diagonal_reaches_minimum_p() {
        // stat is 1 on the diagonal, 0 elsewhere: only the identity reaches 1.0.
        let k = 20;
        let out = permutation_test(k, |i, j| if i == j { 1.0 } else { 0.0 }, 100, 3, PermutationMode::Sampled).unwrap();
        assert_eq!(out.observed, 1.0);
        assert_eq!(out.p_value, 1.0 / 101.0);
        assert!(out.baseline < 0.2);
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        let stat = |i: usize, j: usize| ((i * 7 + j * 3) % 5) as f64 / 5.0;
        let a = permutation_test(12, stat, 200, 42, PermutationMode::Sampled).unwrap();
        let b = permutation_test(12, stat, 200, 42, PermutationMode::Sampled).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn auto_switches_to_exhaustive_when_cheap() {
        let stat = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
        let out = permutation_test(4, stat, 100, 1, PermutationMode::Auto).unwrap();
        assert!(out.exhaustive);
        assert_eq!(out.permutations, 24);
        assert_eq!(out.p_value, 1.0 / 24.0);
        let sampled = permutation_test(4, stat, 10, 1, PermutationMode::Auto).unwrap();
        assert!(!sampled.exhaustive);
    }
}
