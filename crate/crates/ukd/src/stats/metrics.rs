//! Classification metric kernels: balanced accuracy, support-weighted F1,
//! and rank-statistic AUC with midrank tie handling.

use std::collections::BTreeMap;

use crate::error::{Result, UkdError};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(UkdError::Dimension("metrics need at least one sample".into()));
    }
    if a != b {
        return Err(UkdError::Dimension(format!("{a} labels vs {b} predictions")));
    }
    Ok(())
}

/// Per-class counts: (true count, predicted count, correct count), keyed by
/// class id in ascending order.
fn class_counts(y_true: &[usize], y_pred: &[usize]) -> BTreeMap<usize, (usize, usize, usize)> {
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        counts.entry(t).or_default().0 += 1;
        counts.entry(p).or_default().1 += 1;
        if t == p {
            counts.entry(t).or_default().2 += 1;
        }
    }
    counts
}

/// Mean of per-class recalls over the classes present in `y_true`.
/// A prediction naming a class never seen in `y_true` has no recall to
/// contribute and makes the metric undefined.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check_lengths(y_true.len(), y_pred.len())?;
    let counts = class_counts(y_true, y_pred);
    let mut recall_sum = 0.0;
    let mut classes = 0usize;
    for (&c, &(support, _, correct)) in &counts {
        if support == 0 {
            return Err(UkdError::UndefinedMetric(format!(
                "predicted class {c} never appears in the true labels"
            )));
        }
        recall_sum += correct as f64 / support as f64;
        classes += 1;
    }
    Ok(recall_sum / classes as f64)
}

/// Support-weighted mean of per-class F1 over the classes present in
/// `y_true`. A class with zero precision-plus-recall contributes F1 = 0.
pub fn weighted_f1(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check_lengths(y_true.len(), y_pred.len())?;
    let counts = class_counts(y_true, y_pred);
    let n = y_true.len() as f64;
    let mut total = 0.0;
    for (_, &(support, predicted, correct)) in &counts {
        if support == 0 {
            continue;
        }
        let recall = correct as f64 / support as f64;
        let precision = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        total += (support as f64 / n) * f1;
    }
    Ok(total)
}

/// Midranks (1-based, ties averaged) of the values.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite scores"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average of ranks i+1..=j+1.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Binary AUC by the rank statistic: the positive-class mean rank, shifted
/// and scaled, with tied scores receiving midranks. Equivalent to the
/// pair-counting definition with half credit for ties.
pub fn auc_binary(y_true: &[bool], scores: &[f64]) -> Result<f64> {
    check_lengths(y_true.len(), scores.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(UkdError::Parameter("scores must be finite".into()));
    }
    let pos = y_true.iter().filter(|&&t| t).count();
    let neg = y_true.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(UkdError::UndefinedMetric(
            "AUC needs both a positive and a negative example".into(),
        ));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 =
        y_true.iter().zip(&ranks).filter(|(&t, _)| t).map(|(_, &r)| r).sum();
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Macro one-vs-rest AUC: the unweighted mean of the binary AUCs scoring
/// each class present in `y_true` against the rest. `scores` is row-major
/// `[n, classes]`.
pub fn auc_macro_ovr(y_true: &[usize], scores: &[f64], classes: usize) -> Result<f64> {
    if classes == 0 {
        return Err(UkdError::Dimension("need at least one score column".into()));
    }
    check_lengths(y_true.len(), scores.len() / classes)?;
    if scores.len() != y_true.len() * classes {
        return Err(UkdError::Dimension(format!(
            "{} scores for {} samples x {classes} classes",
            scores.len(),
            y_true.len()
        )));
    }
    let mut present: Vec<usize> = y_true.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(UkdError::UndefinedMetric("macro AUC needs at least two classes".into()));
    }
    if *present.last().unwrap() >= classes {
        return Err(UkdError::Dimension(format!(
            "label {} outside the {classes} score columns",
            present.last().unwrap()
        )));
    }
    let mut total = 0.0;
    for &c in &present {
        let truth: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
        let col: Vec<f64> = (0..y_true.len()).map(|i| scores[i * classes + c]).collect();
        total += auc_binary(&truth, &col)?;
    }
    Ok(total / present.len() as f64)
}
