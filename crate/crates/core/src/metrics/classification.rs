//! Classification metrics: ROC AUC (rank statistic, ties at half weight),
//! DeLong's variance estimate, average precision, and the combined report.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::special::norm_quantile;
use super::MetricsError;

/// Full set of test-set classification metrics.
///
/// Binary problems score the positive class directly; multi-class problems
/// extend AUC and average precision by micro-averaging (one-vs-rest pairs
/// flattened into a single binary problem) and F1 by pooled counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub auc: f64,
    pub auc_ci_low: f64,
    pub auc_ci_high: f64,
    /// 1 - accuracy.
    pub error: f64,
    /// Mean per-class recall over classes with support.
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub mean_average_precision: f64,
    pub cohens_kappa: f64,
    /// Recall per class; `None` when the class has no true samples.
    pub per_class_sensitivity: Vec<Option<f64>>,
}

fn check_binary_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            what: "labels",
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite("scores"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass);
    }
    Ok((positives, negatives))
}

/// Binary ROC AUC as the normalized Mann-Whitney U statistic, counting tied
/// score pairs at half weight. Computed from midranks in O(n log n).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    let (positives, negatives) = check_binary_inputs(scores, labels)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Midranks: tied entries share the average of their 1-based ranks.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }

    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Micro-averaged multi-class AUC: one-vs-rest (score, indicator) pairs for
/// every sample and class are flattened into a single binary AUC.
pub fn roc_auc_micro(probs: &ArrayView2<f64>, labels: &[usize]) -> Result<f64, MetricsError> {
    let (scores, indicators) = flatten_one_vs_rest(probs, labels)?;
    roc_auc(&scores, &indicators)
}

fn flatten_one_vs_rest(
    probs: &ArrayView2<f64>,
    labels: &[usize],
) -> Result<(Vec<f64>, Vec<bool>), MetricsError> {
    let n_classes = probs.ncols();
    if probs.nrows() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            what: "labels",
            expected: probs.nrows(),
            got: labels.len(),
        });
    }
    let mut scores = Vec::with_capacity(labels.len() * n_classes);
    let mut indicators = Vec::with_capacity(labels.len() * n_classes);
    for (i, row) in probs.rows().into_iter().enumerate() {
        if labels[i] >= n_classes {
            return Err(MetricsError::LabelOutOfRange {
                label: labels[i],
                n_classes,
            });
        }
        for (c, &p) in row.iter().enumerate() {
            scores.push(p);
            indicators.push(labels[i] == c);
        }
    }
    Ok((scores, indicators))
}

/// AUC and DeLong variance from the structural components
/// V10(i) = mean_j psi(x_i, y_j) and V01(j) = mean_i psi(x_i, y_j).
pub fn delong_components(scores: &[f64], labels: &[bool]) -> Result<(f64, f64), MetricsError> {
    let (positives, negatives) = check_binary_inputs(scores, labels)?;
    if positives < 2 || negatives < 2 {
        return Err(MetricsError::DegenerateClassSizes {
            positives,
            negatives,
        });
    }

    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();

    let psi = |x: f64, y: f64| -> f64 {
        if x > y {
            1.0
        } else if x == y {
            0.5
        } else {
            0.0
        }
    };

    let m = pos.len() as f64;
    let n = neg.len() as f64;
    let v10: Vec<f64> = pos
        .iter()
        .map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / n)
        .collect();
    let v01: Vec<f64> = neg
        .iter()
        .map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / m)
        .collect();

    let auc = v10.iter().sum::<f64>() / m;
    let s10 = v10.iter().map(|v| (v - auc).powi(2)).sum::<f64>() / (m - 1.0);
    let s01 = v01.iter().map(|v| (v - auc).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((auc, s10 / m + s01 / n))
}

/// AUC with a DeLong normal-approximation confidence interval.
///
/// Returns `(auc, low, high)` with the interval clipped to [0, 1].
pub fn delong_ci(
    scores: &[f64],
    labels: &[bool],
    level: f64,
) -> Result<(f64, f64, f64), MetricsError> {
    assert!(level > 0.0 && level < 1.0, "confidence level in (0, 1)");
    let (auc, variance) = delong_components(scores, labels)?;
    let z = norm_quantile(1.0 - (1.0 - level) / 2.0);
    let half = z * variance.max(0.0).sqrt();
    Ok((auc, (auc - half).max(0.0), (auc + half).min(1.0)))
}

/// ROC curve points `(fpr, tpr)` from (0,0) to (1,1), one step per distinct
/// score threshold, for export and plotting.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let (positives, negatives) = check_binary_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
        i = j;
    }
    Ok(points)
}

/// Average precision: sum over descending distinct thresholds of
/// (recall step) x (precision at the threshold).
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    let (positives, _) = check_binary_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Build the full report from per-class probabilities and true labels.
/// Predictions are the argmax of each row.
pub fn classification_report(
    probs: &ArrayView2<f64>,
    labels: &[usize],
) -> Result<ClassificationReport, MetricsError> {
    let n = probs.nrows();
    let n_classes = probs.ncols();
    if labels.len() != n {
        return Err(MetricsError::LengthMismatch {
            what: "labels",
            expected: n,
            got: labels.len(),
        });
    }
    for (i, row) in probs.rows().into_iter().enumerate() {
        if row.iter().any(|p| !p.is_finite()) {
            return Err(MetricsError::NonFinite("probabilities"));
        }
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MetricsError::InvalidProbabilities { row: i, sum });
        }
    }
    for &label in labels {
        if label >= n_classes {
            return Err(MetricsError::LabelOutOfRange {
                label,
                n_classes,
            });
        }
    }

    let predictions: Vec<usize> = probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect();

    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&truth, &pred) in labels.iter().zip(&predictions) {
        confusion[truth][pred] += 1;
    }

    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / n as f64;

    let per_class_sensitivity: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            let support: usize = confusion[c].iter().sum();
            if support == 0 {
                None
            } else {
                Some(confusion[c][c] as f64 / support as f64)
            }
        })
        .collect();
    let present: Vec<f64> = per_class_sensitivity.iter().flatten().cloned().collect();
    let balanced_accuracy = present.iter().sum::<f64>() / present.len() as f64;

    let f1 = if n_classes == 2 {
        let tp = confusion[1][1] as f64;
        let fp = confusion[0][1] as f64;
        let fn_ = confusion[1][0] as f64;
        if 2.0 * tp + fp + fn_ == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    } else {
        // Micro F1 from pooled one-vs-rest counts.
        let tp = correct as f64;
        let fp = (n - correct) as f64;
        let fn_ = (n - correct) as f64;
        2.0 * tp / (2.0 * tp + fp + fn_)
    };

    // Chance-corrected agreement from the confusion matrix marginals.
    let pe: f64 = (0..n_classes)
        .map(|c| {
            let row: usize = confusion[c].iter().sum();
            let col: usize = (0..n_classes).map(|r| confusion[r][c]).sum();
            (row as f64 / n as f64) * (col as f64 / n as f64)
        })
        .sum();
    let cohens_kappa = if (1.0 - pe).abs() < 1e-12 {
        0.0
    } else {
        (accuracy - pe) / (1.0 - pe)
    };

    let (auc, auc_ci_low, auc_ci_high, mean_average_precision) = if n_classes == 2 {
        let scores: Vec<f64> = probs.column(1).to_vec();
        let binary: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let (auc, lo, hi) = delong_ci(&scores, &binary, 0.95)?;
        let ap = average_precision(&scores, &binary)?;
        (auc, lo, hi, ap)
    } else {
        let (scores, indicators) = flatten_one_vs_rest(probs, labels)?;
        let (auc, lo, hi) = delong_ci(&scores, &indicators, 0.95)?;
        let ap = average_precision(&scores, &indicators)?;
        (auc, lo, hi, ap)
    };

    Ok(ClassificationReport {
        auc,
        auc_ci_low,
        auc_ci_high,
        error: 1.0 - accuracy,
        balanced_accuracy,
        f1,
        mean_average_precision,
        cohens_kappa,
        per_class_sensitivity,
    })
}
