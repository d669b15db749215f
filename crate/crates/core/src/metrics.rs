//! Accuracy metrics for imbalanced classification.

use std::collections::BTreeMap;

use crate::encoding::{normalize_scm, one_hot, soft_confusion_matrix, ClassCounts};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsBundle {
    pub top1: f64,
    pub topk: BTreeMap<usize, f64>,
    pub minority_top1: f64,
    pub minority_classes: Vec<usize>,
    /// Test soft-confusion matrix with row `p` divided by the number of
    /// test instances of class `p`.
    pub scm_normalized: Matrix,
    /// Hard per-class recall.
    pub per_class_recall: Vec<f64>,
}

fn check_rows(outputs: &Matrix, labels: &[usize]) -> Result<()> {
    if outputs.rows() != labels.len() {
        return Err(Error::CountMismatch {
            images: outputs.rows(),
            labels: labels.len(),
        });
    }
    if outputs.rows() == 0 {
        return Err(Error::Empty { op: "accuracy" });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= outputs.cols()) {
        return Err(Error::ClassIndex {
            index: bad,
            num_classes: outputs.cols(),
        });
    }
    Ok(())
}

/// Rank of the true class in a row: the number of classes ordered ahead
/// of it, where equal scores order by lower index first.
fn rank_of(row: &[f64], class: usize) -> usize {
    let v = row[class];
    row.iter()
        .enumerate()
        .filter(|&(j, &u)| u > v || (u == v && j < class))
        .count()
}

pub fn top_k_accuracy(outputs: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    check_rows(outputs, labels)?;
    if k == 0 || k > outputs.cols() {
        return Err(Error::invalid(format!(
            "k must be in 1..={}, got {k}",
            outputs.cols()
        )));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &c)| rank_of(outputs.row(i), c) < k)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// The `n_min` classes with the fewest training instances, lowest index
/// first on ties, returned in ascending class order.
pub fn minority_classes(train_counts: &ClassCounts, n_min: usize) -> Result<Vec<usize>> {
    if n_min > train_counts.len() {
        return Err(Error::invalid(format!(
            "n_min {n_min} exceeds the {} classes",
            train_counts.len()
        )));
    }
    let mut order: Vec<usize> = (0..train_counts.len()).collect();
    order.sort_by_key(|&p| (train_counts.as_slice()[p], p));
    let mut picked = order[..n_min].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Top-1 accuracy restricted to rows whose true class is in `minority`.
pub fn minority_accuracy(outputs: &Matrix, labels: &[usize], minority: &[usize]) -> Result<f64> {
    check_rows(outputs, labels)?;
    if minority.is_empty() {
        return Err(Error::invalid("minority class set is empty"));
    }
    let mut total = 0usize;
    let mut hits = 0usize;
    for (i, &c) in labels.iter().enumerate() {
        if minority.contains(&c) {
            total += 1;
            if rank_of(outputs.row(i), c) == 0 {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid(format!(
            "no test instances belong to minority classes {minority:?}"
        )));
    }
    Ok(hits as f64 / total as f64)
}

/// Per-class hard recall: correct predictions of class `p` over `n_p`.
pub fn per_class_recall(outputs: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_rows(outputs, labels)?;
    let n = outputs.cols();
    let mut hits = vec![0usize; n];
    let mut totals = vec![0usize; n];
    for (i, &c) in labels.iter().enumerate() {
        totals[c] += 1;
        if rank_of(outputs.row(i), c) == 0 {
            hits[c] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect())
}

/// Scores a batch of outputs; `top_ks` larger than the class count are
/// clamped to it.
pub fn score(
    outputs: &Matrix,
    labels: &[usize],
    minority: &[usize],
    top_ks: &[usize],
) -> Result<MetricsBundle> {
    check_rows(outputs, labels)?;
    let n = outputs.cols();
    let mut topk = BTreeMap::new();
    for &k in top_ks {
        let k = k.clamp(1, n);
        topk.insert(k, top_k_accuracy(outputs, labels, k)?);
    }
    let counts = ClassCounts::from_labels(labels, n)?;
    let scm = soft_confusion_matrix(&one_hot(labels, n)?, outputs)?;
    Ok(MetricsBundle {
        top1: top_k_accuracy(outputs, labels, 1)?,
        topk,
        minority_top1: minority_accuracy(outputs, labels, minority)?,
        minority_classes: minority.to_vec(),
        scm_normalized: normalize_scm(&scm, &counts)?,
        per_class_recall: per_class_recall(outputs, labels)?,
    })
}

/// Fraction rendered as a percentage with two decimals.
pub fn percent(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}
