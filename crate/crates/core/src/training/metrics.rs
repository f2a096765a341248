//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub balanced_accuracy: f64,
    pub f1_weighted: f64,
    pub auc_macro_ovr: f64,
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated split.
    pub per_class_recall: Vec<Option<f64>>,
    /// `confusion_matrix[true][predicted]`.
    pub confusion_matrix: Vec<Vec<usize>>,
    pub n_examples: usize,
    pub n_trainable_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

/// Lowest index of the largest entry.
pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub fn confusion_matrix(labels: &[usize], predicted: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut cm = vec![vec![0; n_classes]; n_classes];
    for (&y, &p) in labels.iter().zip(predicted) {
        cm[y][p] += 1;
    }
    cm
}

/// Unweighted mean recall over classes present in `cm`.
pub fn balanced_accuracy(cm: &[Vec<usize>]) -> f64 {
    let recalls: Vec<f64> = per_class_recall(cm).into_iter().flatten().collect();
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

pub fn per_class_recall(cm: &[Vec<usize>]) -> Vec<Option<f64>> {
    cm.iter()
        .enumerate()
        .map(|(c, row)| {
            let support: usize = row.iter().sum();
            (support > 0).then(|| row[c] as f64 / support as f64)
        })
        .collect()
}

/// Support-weighted mean of per-class F1.
pub fn f1_weighted(cm: &[Vec<usize>]) -> f64 {
    let total: usize = cm.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (c, row) in cm.iter().enumerate() {
        let support: usize = row.iter().sum();
        if support == 0 {
            continue;
        }
        let tp = row[c] as f64;
        let predicted: usize = cm.iter().map(|r| r[c]).sum();
        let denom = support as f64 + predicted as f64;
        let f1 = if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
        acc += support as f64 * f1;
    }
    acc / total as f64
}

/// Area under the ROC curve of `scores` for the positives in `positive`,
/// via the rank-sum statistic with tied scores sharing their mean rank.
/// `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(positive[a].cmp(&positive[b])));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].total_cmp(&scores[order[i]]).is_eq() {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| positive[k]).count();
        rank_sum += mean_rank * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Macro average of one-vs-rest AUCs over classes with both positives and negatives.
pub fn auc_macro_ovr(labels: &[usize], probs: &[Vec<f64>], n_classes: usize) -> Option<f64> {
    let aucs: Vec<f64> = (0..n_classes)
        .filter_map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            binary_auc(&scores, &pos)
        })
        .collect();
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Full report from class probabilities. Absent classes are left out of
/// balanced accuracy with a warning; an undefined AUC is reported as 0.5.
pub fn compute_metrics(labels: &[usize], probs: &[Vec<f64>], n_classes: usize) -> Result<MetricsReport> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    if labels.len() != probs.len() {
        return Err(Error::Shape {
            op: "compute_metrics",
            detail: format!("{} labels but {} predictions", labels.len(), probs.len()),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::OutOfRange {
            op: "compute_metrics",
            index: y,
            len: n_classes,
        });
    }
    if probs.iter().any(|p| p.len() != n_classes) {
        return Err(Error::Shape {
            op: "compute_metrics",
            detail: format!("probability rows must have {n_classes} entries"),
        });
    }
    let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let cm = confusion_matrix(labels, &predicted, n_classes);
    let recall = per_class_recall(&cm);
    let absent: Vec<usize> = (0..n_classes).filter(|&c| recall[c].is_none()).collect();
    if !absent.is_empty() {
        log::warn!("classes {absent:?} are absent from the evaluated split; excluded from balanced accuracy");
    }
    let auc = auc_macro_ovr(labels, probs, n_classes).unwrap_or_else(|| {
        log::warn!("AUC undefined with a single class present; reporting 0.5");
        0.5
    });
    let correct = labels.iter().zip(&predicted).filter(|(a, b)| a == b).count();
    Ok(MetricsReport {
        balanced_accuracy: balanced_accuracy(&cm),
        f1_weighted: f1_weighted(&cm),
        auc_macro_ovr: auc,
        accuracy: correct as f64 / labels.len() as f64,
        per_class_recall: recall,
        confusion_matrix: cm,
        n_examples: labels.len(),
        n_trainable_params: 0,
        loss: None,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn one_hot(pred: &[usize], n: usize) -> Vec<Vec<f64>> {
        pred.iter()
            .map(|&p| (0..n).map(|c| if c == p { 0.9 } else { 0.1 / (n - 1) as f64 }).collect())
            .collect()
    }

    #[test]
    fn hand_confusion_matrix() {
        let y = [0, 0, 1, 1];
        let m = compute_metrics(&y, &one_hot(&[0, 1, 1, 1], 2), 2).unwrap();
        assert_eq!(m.per_class_recall, vec![Some(0.5), Some(1.0)]);
        assert_abs_diff_eq!(m.balanced_accuracy, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(m.f1_weighted, (2.0 * (2.0 / 3.0) + 2.0 * 0.8) / 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.f1_weighted, 0.7333, epsilon = 1e-4);
        assert_eq!(m.confusion_matrix, vec![vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn auc_extremes_and_ties() {
        assert_eq!(binary_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(binary_auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), Some(0.0));
        assert_eq!(binary_auc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(binary_auc(&[0.5, 0.6], &[true, true]), None);
        let probs = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.3, 0.7], vec![0.4, 0.6]];
        assert_eq!(auc_macro_ovr(&[0, 0, 1, 1], &probs, 2), Some(1.0));
    }

    #[test]
    fn absent_class_is_excluded() {
        let m = compute_metrics(&[0, 0, 1], &one_hot(&[0, 0, 2], 3), 3).unwrap();
        assert_eq!(m.per_class_recall, vec![Some(1.0), Some(0.0), None]);
        assert_abs_diff_eq!(m.balanced_accuracy, 0.5);
        assert!(compute_metrics(&[], &[], 3).is_err());
        assert!(compute_metrics(&[5], &one_hot(&[0], 3), 3).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariance_and_ranges(
            data in proptest::collection::vec((0usize..4, proptest::collection::vec(0.0f64..1.0, 4)), 1..60),
            seed in 0u64..100,
        ) {
            let (labels, probs): (Vec<usize>, Vec<Vec<f64>>) = data.into_iter().unzip();
            let a = compute_metrics(&labels, &probs, 4).unwrap();
            let mut idx: Vec<usize> = (0..labels.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let l2: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let p2: Vec<Vec<f64>> = idx.iter().map(|&i| probs[i].clone()).collect();
            let b = compute_metrics(&l2, &p2, 4).unwrap();
            prop_assert_eq!(&a, &b);
            for v in [a.balanced_accuracy, a.f1_weighted, a.auc_macro_ovr, a.accuracy] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let recalls: Vec<f64> = a.per_class_recall.iter().flatten().copied().collect();
            prop_assert!((a.balanced_accuracy - recalls.iter().sum::<f64>() / recalls.len() as f64).abs() < 1e-12);
        }
    }
}
