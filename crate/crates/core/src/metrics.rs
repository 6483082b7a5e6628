//! Evaluation metrics: clean/noisy ROC-AUC, accuracy and loss quartiles.

use crate::error::{Error, Result};

/// ROC-AUC of `scores` as a detector of `positives`, via the Mann–Whitney
/// rank statistic with average ranks for ties (a tie counts one half).
///
/// `None` when either class is empty.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<Option<f64>> {
    if scores.len() != positives.len() {
        return Err(Error::shape("roc_auc", scores.len(), positives.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores", "NaN score"));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if positives[k] {
                rank_sum_pos += avg;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos as f64 * n_neg as f64)))
}

/// AUC of noisy posteriors against the corruption mask.
pub fn clean_noisy_auc(posteriors: &[f64], corruption_mask: &[bool]) -> Result<Option<f64>> {
    roc_auc(posteriors, corruption_mask)
}

/// Fraction of `predicted` equal to `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::shape("accuracy", truth.len(), predicted.len()));
    }
    if truth.is_empty() {
        return Err(Error::invalid("truth", "empty split"));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// 25th, 50th and 75th percentiles with linear interpolation between order
/// statistics; `None` for an empty input.
pub fn quartiles(values: &[f64]) -> Option<[f64; 3]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some([q(0.25), q(0.5), q(0.75)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(scores: &[f64], pos: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        let mask = [true, true, false, false];
        assert_eq!(clean_noisy_auc(&[0.9, 0.8, 0.7, 0.1], &mask).unwrap(), Some(1.0));
        assert_eq!(brute_force(&[0.9, 0.8, 0.7, 0.1], &mask), 1.0);
        // swap the 0.8 noisy score with the 0.7 clean one
        assert_eq!(clean_noisy_auc(&[0.9, 0.7, 0.8, 0.1], &mask).unwrap(), Some(0.75));
        assert_eq!(brute_force(&[0.9, 0.7, 0.8, 0.1], &mask), 0.75);
        assert_eq!(clean_noisy_auc(&[0.4; 4], &mask).unwrap(), Some(0.5));
    }

    #[test]
    fn auc_absent_for_single_class() {
        assert_eq!(clean_noisy_auc(&[0.1, 0.2], &[false, false]).unwrap(), None);
        assert_eq!(clean_noisy_auc(&[0.1, 0.2], &[true, true]).unwrap(), None);
    }

    #[test]
    fn accuracy_examples() {
        assert!((accuracy(&[0, 1, 2], &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let truth: Vec<usize> = (0..100).map(|i| i % 10).collect();
        assert_eq!(accuracy(&[3; 100], &truth).unwrap(), 0.1);
        assert_eq!(accuracy(&truth, &truth).unwrap(), 1.0);
    }

    #[test]
    fn quartiles_interpolate() {
        assert_eq!(quartiles(&[4.0, 1.0, 3.0, 2.0, 5.0]), Some([2.0, 3.0, 4.0]));
        assert_eq!(quartiles(&[]), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rank_auc_matches_pairwise(
                pts in prop::collection::vec((0u8..6, any::<bool>()), 2..40)
            ) {
                let scores: Vec<f64> = pts.iter().map(|p| p.0 as f64 / 5.0).collect();
                let pos: Vec<bool> = pts.iter().map(|p| p.1).collect();
                match roc_auc(&scores, &pos).unwrap() {
                    None => prop_assert!(pos.iter().all(|&p| p) || pos.iter().all(|&p| !p)),
                    Some(a) => prop_assert!((a - brute_force(&scores, &pos)).abs() < 1e-12),
                }
            }
        }
    }
}
