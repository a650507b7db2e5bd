//! Threshold-free ranking metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("metric", (scores.len(), 1), (labels.len(), 1)));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("scores must be finite".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, ties kept in index order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Runs of equal scores in descending order: `(true positives, false positives)` per run.
fn threshold_steps(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let order = descending(scores);
    let mut steps = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut tp, mut fp) = (0, 0);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((tp, fp));
    }
    steps
}

/// Trapezoidal area under the ROC curve; tied scores form one threshold
/// step, which counts positive/negative ties as one half.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC-ROC needs both classes ({pos} positives, {neg} negatives)"
        )));
    }
    let mut tp = 0usize;
    let mut area = 0.0;
    for (dtp, dfp) in threshold_steps(scores, labels) {
        // Trapezoid of width dfp between heights tp and tp + dtp, in counts.
        area += dfp as f64 * (2 * tp + dtp) as f64 / 2.0;
        tp += dtp;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// Average precision: `Σ (R_t − R_{t−1}) · P_t` over score thresholds.
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUC-PR needs at least one positive".into()));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    for (dtp, dfp) in threshold_steps(scores, labels) {
        tp += dtp;
        seen += dtp + dfp;
        if dtp > 0 {
            ap += (dtp as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// Evaluation snapshot written to the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u32,
    pub auc_roc: f64,
    pub auc_pr: f64,
    /// Global training loss of the last completed round, if any.
    pub global_loss: Option<f64>,
    pub dataset: String,
    pub devices: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Rng, Stream};
    use proptest::prelude::*;

    // O(n²) oracles.
    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    fn brute_ap(scores: &[f64], labels: &[u8]) -> f64 {
        let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
        let mut total = 0.0;
        for i in 0..scores.len() {
            if labels[i] != 1 {
                continue;
            }
            let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
            let tp = above.iter().filter(|&&j| labels[j] == 1).count() as f64;
            total += tp / above.len() as f64;
        }
        total / pos
    }

    #[test]
    fn roc_extremes() {
        assert_eq!(auc_roc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert!(matches!(auc_roc(&[0.1, 0.9], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn pr_extremes() {
        assert_eq!(auc_pr(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        // All-equal scores: a single step at precision = prevalence.
        let labels = [1, 0, 0, 1, 0, 0, 0, 0];
        assert!((auc_pr(&[0.4; 8], &labels).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(auc_pr(&[0.1], &[0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn random_instances_match_oracles() {
        let mut rng = Rng::derive(1, Stream::Test, &[]);
        for _ in 0..200 {
            let n = 2 + rng.below(60);
            // Coarse scores so ties are common.
            let scores: Vec<f64> = (0..n).map(|_| (rng.below(12) as f64) / 11.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.4))).collect();
            labels[0] = 1;
            labels[1] = 0;
            assert!((auc_roc(&scores, &labels).unwrap() - pairwise_auc(&scores, &labels)).abs() < 1e-9);
            assert!((auc_pr(&scores, &labels).unwrap() - brute_ap(&scores, &labels)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn roc_invariant_under_monotone_maps(
            raw in prop::collection::vec((-5.0f64..5.0, 0u8..=1), 2..80),
            a in 0.1f64..4.0,
            b in -3.0f64..3.0,
        ) {
            let (scores, mut labels): (Vec<f64>, Vec<u8>) = raw.into_iter().unzip();
            labels[0] = 1;
            labels[1] = 0;
            let base = auc_roc(&scores, &labels).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|&s| (a * s).exp() + b).collect();
            let monotone = auc_roc(&mapped, &labels).unwrap();
            let sig: Vec<f64> = scores.iter().map(|&s| 1.0 / (1.0 + (-a * s).exp())).collect();
            prop_assert!((base - monotone).abs() < 1e-12);
            prop_assert!((base - auc_roc(&sig, &labels).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&base));
        }
    }
}
