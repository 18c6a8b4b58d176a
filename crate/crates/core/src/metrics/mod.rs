//! Multi-label ranking and classification metrics.
//!
//! Scores are ranked per sample in descending order, ties broken by
//! ascending label index. Pairwise counts give tied pairs half credit.

pub mod oracle;

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::Matrix;

/// Metric value and the number of samples (or labels, for AUC) left out
/// because the metric is undefined on them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub value: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    /// Rows without a positive label (AP, OE, Cov).
    pub no_positive: usize,
    /// Rows without a positive or without a negative label (RL).
    pub ranking: usize,
    /// Labels without both classes in the pool (AUC).
    pub auc_labels: usize,
}

/// The six reported metrics. Every value lies in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: f64,
    pub one_minus_hl: f64,
    pub one_minus_rl: f64,
    pub auc: f64,
    pub oe: f64,
    pub cov: f64,
    pub n_eval: usize,
    pub skipped: SkipCounts,
}

fn check_inputs(p: &Matrix, y: &Matrix) -> Result<()> {
    p.check_same_shape(y, "metrics")?;
    if !p.all_finite() {
        return Err(Error::contract("scores must be finite"));
    }
    if y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract("ground truth must be binary"));
    }
    Ok(())
}

/// Label indices of one row in rank order.
fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn mean_over_rows(
    p: &Matrix,
    y: &Matrix,
    name: &'static str,
    per_row: impl Fn(&[f64], &[f64]) -> Option<f64>,
) -> Result<Scored> {
    check_inputs(p, y)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for i in 0..p.rows() {
        if let Some(v) = per_row(p.row(i), y.row(i)) {
            total += v;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric(name));
    }
    Ok(Scored {
        value: total / counted as f64,
        skipped: p.rows() - counted,
    })
}

pub fn average_precision(p: &Matrix, y: &Matrix) -> Result<Scored> {
    mean_over_rows(p, y, "AP", |scores, truth| {
        let positives = truth.iter().filter(|&&t| t == 1.0).count();
        if positives == 0 {
            return None;
        }
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (pos, &j) in rank_order(scores).iter().enumerate() {
            if truth[j] == 1.0 {
                hits += 1;
                sum += hits as f64 / (pos + 1) as f64;
            }
        }
        Some(sum / positives as f64)
    })
}

/// Fraction of cells where `p > threshold` disagrees with the truth.
pub fn hamming_loss(p: &Matrix, y: &Matrix, threshold: f64) -> Result<f64> {
    check_inputs(p, y)?;
    if p.is_empty() {
        return Err(Error::UndefinedMetric("HL"));
    }
    let wrong = p
        .data()
        .iter()
        .zip(y.data())
        .filter(|(&s, &t)| (s > threshold) != (t == 1.0))
        .count();
    Ok(wrong as f64 / p.len() as f64)
}

/// Misordered plus half the tied `(positive, negative)` pairs, as a fraction.
fn pair_disorder(pos_scores: &[f64], neg_scores: &mut [f64]) -> f64 {
    neg_scores.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let mut bad = 0.0;
    for &s in pos_scores {
        let below = neg_scores.partition_point(|&x| x < s);
        let not_above = neg_scores.partition_point(|&x| x <= s);
        bad += (neg_scores.len() - not_above) as f64 + 0.5 * (not_above - below) as f64;
    }
    bad / (pos_scores.len() * neg_scores.len()) as f64
}

pub fn ranking_loss(p: &Matrix, y: &Matrix) -> Result<Scored> {
    mean_over_rows(p, y, "RL", |scores, truth| {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (&s, &t) in scores.iter().zip(truth) {
            if t == 1.0 {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        Some(pair_disorder(&pos, &mut neg))
    })
}

/// Macro average over labels of the per-label pairwise AUC.
pub fn auc(p: &Matrix, y: &Matrix) -> Result<Scored> {
    check_inputs(p, y)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for j in 0..p.cols() {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for i in 0..p.rows() {
            if y[(i, j)] == 1.0 {
                pos.push(p[(i, j)]);
            } else {
                neg.push(p[(i, j)]);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        total += 1.0 - pair_disorder(&pos, &mut neg);
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric("AUC"));
    }
    Ok(Scored {
        value: total / counted as f64,
        skipped: p.cols() - counted,
    })
}

pub fn one_error(p: &Matrix, y: &Matrix) -> Result<Scored> {
    mean_over_rows(p, y, "OE", |scores, truth| {
        if !truth.contains(&1.0) {
            return None;
        }
        let top = rank_order(scores)[0];
        Some(if truth[top] == 1.0 { 0.0 } else { 1.0 })
    })
}

/// Depth of the deepest positive minus one, divided by the label count.
pub fn coverage(p: &Matrix, y: &Matrix) -> Result<Scored> {
    let c = p.cols() as f64;
    mean_over_rows(p, y, "Cov", |scores, truth| {
        let deepest = rank_order(scores).iter().rposition(|&j| truth[j] == 1.0)?;
        Some(deepest as f64 / c)
    })
}

pub fn evaluate(p: &Matrix, y: &Matrix) -> Result<MetricsReport> {
    let ap = average_precision(p, y)?;
    let rl = ranking_loss(p, y)?;
    let au = auc(p, y)?;
    let oe = one_error(p, y)?;
    let cov = coverage(p, y)?;
    Ok(MetricsReport {
        ap: ap.value,
        one_minus_hl: 1.0 - hamming_loss(p, y, 0.5)?,
        one_minus_rl: 1.0 - rl.value,
        auc: au.value,
        oe: oe.value,
        cov: cov.value,
        n_eval: p.rows(),
        skipped: SkipCounts {
            no_positive: ap.skipped,
            ranking: rl.skipped,
            auc_labels: au.skipped,
        },
    })
}

/// Scores every row with the per-label frequency among known training labels.
pub fn label_prior_scores(labels: &Matrix, label_mask: &Matrix, rows: usize) -> Result<Matrix> {
    labels.check_same_shape(label_mask, "label_prior_scores")?;
    let c = labels.cols();
    let prior: Vec<f64> = (0..c)
        .map(|j| {
            let (mut pos, mut known) = (0.0, 0.0);
            for i in 0..labels.rows() {
                pos += labels[(i, j)] * label_mask[(i, j)];
                known += label_mask[(i, j)];
            }
            if known > 0.0 {
                pos / known
            } else {
                0.0
            }
        })
        .collect();
    Ok(Matrix::from_fn(rows, c, |_, j| prior[j]))
}

pub fn write_metrics_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("metrics serialize");
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}
