//! Ranking quality metrics (AUC, NDCG@k) and a paired bootstrap test for
//! comparing rerankers on the same sessions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Probability that a uniformly random positive outranks a uniformly random
/// negative, ties counted half; `None` when only one class is present.
pub fn auc(scored: &[(f64, bool)]) -> Option<f64> {
    let n_pos = scored.iter().filter(|(_, y)| *y).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut wins = 0.0;
    for &(sp, yp) in scored.iter().filter(|(_, y)| *y) {
        debug_assert!(yp);
        for &(sn, _) in scored.iter().filter(|(_, y)| !*y) {
            wins += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (n_pos * n_neg) as f64)
}

/// Normalized discounted cumulative gain over the first `k` ranks, with
/// discount `1 / log2(rank + 1)` (ranks from 1); `1.0` when all gains are
/// zero (nothing to misorder, by convention).
pub fn ndcg_at_k(gains: &[f64], k: usize) -> f64 {
    let k = k.min(gains.len());
    let dcg: f64 = gains[..k]
        .iter()
        .enumerate()
        .map(|(i, &g)| g / ((i + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<f64> = gains.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg: f64 = ideal[..k]
        .iter()
        .enumerate()
        .map(|(i, &g)| g / ((i + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        1.0
    } else {
        dcg / idcg
    }
}

/// Outcome of a paired bootstrap comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapResult {
    /// Observed mean of `a - b`.
    pub mean_diff: f64,
    /// One-sided p-value for "a exceeds b": the (add-one smoothed) fraction
    /// of resampled mean differences at or below zero.
    pub p_value: f64,
}

/// Paired bootstrap over per-session metric pairs: resamples the paired
/// differences `b_samples` times with replacement.
pub fn paired_bootstrap(a: &[f64], b: &[f64], b_samples: usize, seed: u64) -> Result<BootstrapResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired samples of different lengths: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() || b_samples == 0 {
        return Err(Error::InvalidArgument(
            "need at least one pair and one resample".into(),
        ));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean_diff = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at_or_below_zero = 0usize;
    for _ in 0..b_samples {
        let total: f64 = (0..diffs.len())
            .map(|_| diffs[rng.random_range(0..diffs.len())])
            .sum();
        if total <= 0.0 {
            at_or_below_zero += 1;
        }
    }
    Ok(BootstrapResult {
        mean_diff,
        p_value: (at_or_below_zero + 1) as f64 / (b_samples + 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_frozen_examples() {
        // Perfectly ordered.
        assert_eq!(
            auc(&[(0.9, true), (0.7, true), (0.3, false)]),
            Some(1.0)
        );
        // Anti-ordered.
        assert_eq!(auc(&[(0.1, true), (0.9, false)]), Some(0.0));
        // One concordant, one discordant pair.
        let v = auc(&[(0.9, true), (0.8, false), (0.3, true)]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auc_counts_ties_half() {
        let v = auc(&[(0.5, true), (0.5, false)]).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert_eq!(auc(&[(0.9, true), (0.1, true)]), None);
        assert_eq!(auc(&[(0.9, false)]), None);
        assert_eq!(auc(&[]), None);
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let scored = [
            (0.9, true),
            (0.4, false),
            (0.6, true),
            (0.2, false),
            (0.5, false),
        ];
        let base = auc(&scored).unwrap();
        let shifted: Vec<(f64, bool)> =
            scored.iter().map(|&(s, y)| (3.0 * s + 7.0, y)).collect();
        let exped: Vec<(f64, bool)> = scored.iter().map(|&(s, y)| (s.exp(), y)).collect();
        assert_eq!(auc(&shifted).unwrap(), base);
        assert_eq!(auc(&exped).unwrap(), base);
    }

    #[test]
    fn ndcg_frozen_example() {
        let v = ndcg_at_k(&[1.0, 0.0, 1.0], 3);
        let expected = 1.5 / (1.0 + 1.0 / 3f64.log2());
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.91972).abs() < 1e-5);
    }

    #[test]
    fn ndcg_sorted_is_one_and_all_zero_is_one() {
        assert_eq!(ndcg_at_k(&[3.0, 2.0, 1.0], 3), 1.0);
        assert_eq!(ndcg_at_k(&[0.0, 0.0, 0.0], 3), 1.0);
        assert_eq!(ndcg_at_k(&[], 3), 1.0);
    }

    #[test]
    fn ndcg_stays_in_unit_interval_and_k_truncates() {
        let gains = [0.0, 2.0, 0.0, 1.0, 5.0];
        for k in 1..=6 {
            let v = ndcg_at_k(&gains, k);
            assert!((0.0..=1.0).contains(&v), "k={k}: {v}");
        }
        // With k=1 only the first slot counts; gain 0 against ideal 5.
        assert_eq!(ndcg_at_k(&gains, 1), 0.0);
    }

    #[test]
    fn bootstrap_flags_a_clear_winner() {
        let a: Vec<f64> = (0..200).map(|i| 0.8 + 0.001 * (i % 7) as f64).collect();
        let b: Vec<f64> = (0..200).map(|i| 0.6 + 0.001 * (i % 5) as f64).collect();
        let r = paired_bootstrap(&a, &b, 2000, 3).unwrap();
        assert!(r.mean_diff > 0.19);
        assert!(r.p_value < 0.001);
    }

    #[test]
    fn bootstrap_on_identical_samples_is_insignificant() {
        let a = vec![0.5; 100];
        let r = paired_bootstrap(&a, &a, 2000, 3).unwrap();
        assert_eq!(r.mean_diff, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn bootstrap_is_deterministic_given_seed() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin().abs()).collect();
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 1.3).cos().abs()).collect();
        let r1 = paired_bootstrap(&a, &b, 500, 9).unwrap();
        let r2 = paired_bootstrap(&a, &b, 500, 9).unwrap();
        assert_eq!(r1, r2);
        let r3 = paired_bootstrap(&a, &b, 500, 10).unwrap();
        // Same observed difference, resampling may differ.
        assert_eq!(r1.mean_diff, r3.mean_diff);
    }

    #[test]
    fn bootstrap_rejects_bad_shapes() {
        assert!(paired_bootstrap(&[1.0], &[1.0, 2.0], 10, 0).is_err());
        assert!(paired_bootstrap(&[], &[], 10, 0).is_err());
        assert!(paired_bootstrap(&[1.0], &[1.0], 0, 0).is_err());
    }
}
