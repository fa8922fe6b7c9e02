//! Binary-classification metrics shared by the neural and the estimator-based
//! classifiers. Positive class is label 1 (SSB); a state is predicted positive
//! when its score is strictly above the threshold.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub auc: f64,
    /// `(false positive rate, true positive rate)`, from (0,0) to (1,1).
    pub roc: Vec<(f64, f64)>,
    pub probabilities: Vec<f64>,
}

impl Metrics {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let roc = roc_curve(scores, labels);
        Self {
            accuracy: accuracy(scores, labels, threshold),
            auc: auc(&roc),
            roc,
            probabilities: scores.to_vec(),
        }
    }
}

pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| u8::from(s > threshold) == y)
        .count();
    hits as f64 / scores.len() as f64
}

/// ROC points from a sweep over the distinct scores, highest first. Tied
/// scores move together so the curve is independent of input order.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Vec<(f64, f64)> {
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let fpr = if neg > 0.0 { fp / neg } else { 0.0 };
        let tpr = if pos > 0.0 { tp / pos } else { 0.0 };
        pts.push((fpr, tpr));
    }
    if pts.last() != Some(&(1.0, 1.0)) {
        pts.push((1.0, 1.0));
    }
    pts
}

/// Trapezoidal area under a ROC curve.
pub fn auc(roc: &[(f64, f64)]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[1].1 + w[0].1))
        .sum()
}

pub fn roc_auc(scores: &[f64], labels: &[u8]) -> f64 {
    auc(&roc_curve(scores, labels))
}

/// Threshold maximizing accuracy over the given scores (midpoints between
/// consecutive distinct scores plus both extremes). This reuses the evaluated
/// states for tuning and therefore overstates out-of-sample accuracy.
pub fn best_threshold(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let mut sorted: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut candidates = Vec::with_capacity(sorted.len() + 1);
    if let Some(&first) = sorted.first() {
        candidates.push(first - 1.0);
    }
    candidates.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    if let Some(&last) = sorted.last() {
        candidates.push(last);
    }
    candidates
        .into_iter()
        .map(|t| (t, accuracy(scores, labels, t)))
        .fold((f64::NAN, -1.0), |best, c| if c.1 > best.1 { c } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_pair() {
        let m = Metrics::from_scores(&[0.9, 0.1], &[1, 0], 0.5);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.auc, 1.0);
    }

    #[test]
    fn random_scores_give_half_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
        let labels: Vec<u8> = (0..10_000).map(|_| rng.gen_range(0..2)).collect();
        assert!((roc_auc(&scores, &labels) - 0.5).abs() < 0.02);
    }

    #[test]
    fn roc_is_monotone_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..500).map(|_| (rng.gen::<f64>() * 10.0).round()).collect();
        let labels: Vec<u8> = scores.iter().map(|&s| u8::from(s + rng.gen::<f64>() * 6.0 > 8.0)).collect();
        let roc = roc_curve(&scores, &labels);
        assert!(roc.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
        let a = auc(&roc);
        assert!((0.0..=1.0).contains(&a));
        // ties move together: AUC equals the Mann-Whitney statistic with half credit
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi == 1 && yj == 0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        assert!((a - num / den).abs() < 1e-12);
    }

    #[test]
    fn best_threshold_separates() {
        let (t, acc) = best_threshold(&[-0.2, 0.1, 0.4, 0.8], &[0, 0, 1, 1]);
        assert_eq!(acc, 1.0);
        assert!(t > 0.1 && t < 0.4);
        let (_, acc) = best_threshold(&[0.5, 0.5], &[0, 1]);
        assert_eq!(acc, 0.5);
    }
}
