//! Detection metrics: accuracy and ROC-AUC via the rank statistic
//! (Mann-Whitney, ties averaged). The rank form is exact and deterministic,
//! which makes it directly checkable against pair enumeration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub auc: f64,
    pub n: usize,
    pub mean_latency_ms: f64,
    pub config_fingerprint: String,
}

/// Fraction of correct binary predictions.
pub fn compute_accuracy(preds: &[(u8, u8)]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Argument("no predictions".into()));
    }
    let correct = preds.iter().filter(|(p, t)| p == t).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// ROC-AUC: probability that a random positive outscores a random negative,
/// counting ties as one half.
pub fn compute_auc(scored: &[(f64, u8)]) -> Result<f64> {
    let n_pos = scored.iter().filter(|(_, t)| *t == 1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[a]
            .0
            .partial_cmp(&scored[b].0)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    // average ranks over tie groups (ranks are 1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if scored[k].1 == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Exhaustive pair-counting oracle (ties count one half).
    pub fn auc_pair_oracle(scored: &[(f64, u8)]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for &(sp, tp) in scored {
            if tp != 1 {
                continue;
            }
            for &(sn, tn) in scored {
                if tn != 0 {
                    continue;
                }
                pairs += 1.0;
                if sp > sn {
                    wins += 1.0;
                } else if sp == sn {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(compute_accuracy(&[(1, 1), (0, 0)]).unwrap(), 1.0);
        assert_eq!(compute_accuracy(&[(1, 0), (0, 0)]).unwrap(), 0.5);
        let mut preds: Vec<(u8, u8)> = (0..100).map(|i| (u8::from(i < 95), 1)).collect();
        assert_eq!(compute_accuracy(&preds).unwrap(), 0.95);
        preds[0].0 = 0;
        assert_eq!(compute_accuracy(&preds).unwrap(), 0.94);
        assert!(compute_accuracy(&[]).is_err());
    }

    #[test]
    fn auc_closed_cases() {
        // perfect separation
        let a = [(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)];
        assert_eq!(compute_auc(&a).unwrap(), 1.0);
        // all ties
        let b = [(0.5, 1), (0.5, 0), (0.5, 1), (0.5, 0)];
        assert_eq!(compute_auc(&b).unwrap(), 0.5);
        // hand-enumerated: 3 of 4 pairs win
        let c = [(0.9, 1), (0.4, 1), (0.5, 0), (0.1, 0)];
        assert_eq!(compute_auc(&c).unwrap(), 0.75);
        // single-class input is a metric error
        assert!(compute_auc(&[(0.5, 1)]).is_err());
    }

    #[test]
    fn auc_matches_pair_oracle_on_random_instances() {
        let mut rng = crate::rng::derive_rng(0, &[31]);
        for trial in 0..200 {
            let n = rng.random_range(2..=20);
            let mut scored: Vec<(f64, u8)> = (0..n)
                .map(|_| {
                    // coarse scores force plenty of ties
                    let s = f64::from(rng.random_range(0..5)) / 4.0;
                    (s, u8::from(rng.random_bool(0.5)))
                })
                .collect();
            let n_pos = scored.iter().filter(|(_, t)| *t == 1).count();
            if n_pos == 0 {
                scored[0].1 = 1;
            }
            if n_pos == scored.len() {
                scored[0].1 = 0;
            }
            let fast = compute_auc(&scored).unwrap();
            let slow = auc_pair_oracle(&scored);
            assert_eq!(fast, slow, "trial {trial}: {scored:?}");
        }
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let mut rng = crate::rng::derive_rng(1, &[32]);
        let scored: Vec<(f64, u8)> = (0..30)
            .map(|i| (rng.random_range(0.0..1.0), u8::from(i % 3 == 0)))
            .collect();
        let preds: Vec<(u8, u8)> = scored
            .iter()
            .map(|&(s, t)| (u8::from(s > 0.5), t))
            .collect();
        let base_auc = compute_auc(&scored).unwrap();
        let base_acc = compute_accuracy(&preds).unwrap();
        let mut shuffled = scored.clone();
        let mut shuffled_preds = preds.clone();
        for i in (1..shuffled.len()).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
            shuffled_preds.swap(i, j);
        }
        assert_eq!(compute_auc(&shuffled).unwrap(), base_auc);
        assert_eq!(compute_accuracy(&shuffled_preds).unwrap(), base_acc);
    }
}
