//! Brute-force reference implementations that enumerate every pair.
//!
//! Quadratic in both samples and labels; meant for small test inputs.

use super::{MetricsReport, SkipCounts};
use crate::error::{Error, Result};
use crate::nd::Matrix;

/// Whether label `k` is ranked at or above label `j` in `scores`.
fn at_or_above(scores: &[f64], k: usize, j: usize) -> bool {
    scores[k] > scores[j] || (scores[k] == scores[j] && k <= j)
}

fn rank(scores: &[f64], j: usize) -> usize {
    (0..scores.len())
        .filter(|&k| at_or_above(scores, k, j))
        .count()
}

fn pair_credit(pos: f64, neg: f64) -> f64 {
    if pos > neg {
        1.0
    } else if pos == neg {
        0.5
    } else {
        0.0
    }
}

pub fn oracle_all(p: &Matrix, y: &Matrix) -> Result<MetricsReport> {
    p.check_same_shape(y, "oracle_all")?;
    let (n, c) = p.shape();
    let mut skipped = SkipCounts::default();
    let (mut ap, mut oe, mut cov, mut rl) = (0.0, 0.0, 0.0, 0.0);
    let (mut with_pos, mut with_both) = (0usize, 0usize);
    let mut wrong_cells = 0usize;

    for i in 0..n {
        let s = p.row(i);
        let t = y.row(i);
        for j in 0..c {
            if (s[j] > 0.5) != (t[j] == 1.0) {
                wrong_cells += 1;
            }
        }
        let pos: Vec<usize> = (0..c).filter(|&j| t[j] == 1.0).collect();
        let neg: Vec<usize> = (0..c).filter(|&j| t[j] != 1.0).collect();
        if pos.is_empty() {
            skipped.no_positive += 1;
            skipped.ranking += 1;
            continue;
        }
        with_pos += 1;

        let mut row_ap = 0.0;
        for &j in &pos {
            let above = pos.iter().filter(|&&k| at_or_above(s, k, j)).count();
            row_ap += above as f64 / rank(s, j) as f64;
        }
        ap += row_ap / pos.len() as f64;

        let top = (0..c)
            .find(|&j| rank(s, j) == 1)
            .expect("one label ranks first");
        if t[top] != 1.0 {
            oe += 1.0;
        }
        let deepest = pos.iter().map(|&j| rank(s, j)).max().expect("non-empty");
        cov += (deepest - 1) as f64 / c as f64;

        if neg.is_empty() {
            skipped.ranking += 1;
            continue;
        }
        with_both += 1;
        let mut bad = 0.0;
        for &j in &pos {
            for &k in &neg {
                bad += 1.0 - pair_credit(s[j], s[k]);
            }
        }
        rl += bad / (pos.len() * neg.len()) as f64;
    }

    let mut auc = 0.0;
    let mut labels = 0usize;
    for j in 0..c {
        let pos: Vec<usize> = (0..n).filter(|&i| y[(i, j)] == 1.0).collect();
        let neg: Vec<usize> = (0..n).filter(|&i| y[(i, j)] != 1.0).collect();
        if pos.is_empty() || neg.is_empty() {
            skipped.auc_labels += 1;
            continue;
        }
        let mut good = 0.0;
        for &a in &pos {
            for &b in &neg {
                good += pair_credit(p[(a, j)], p[(b, j)]);
            }
        }
        auc += good / (pos.len() * neg.len()) as f64;
        labels += 1;
    }

    if with_pos == 0 {
        return Err(Error::UndefinedMetric("AP"));
    }
    if with_both == 0 {
        return Err(Error::UndefinedMetric("RL"));
    }
    if labels == 0 {
        return Err(Error::UndefinedMetric("AUC"));
    }
    let k = with_pos as f64;
    Ok(MetricsReport {
        ap: ap / k,
        one_minus_hl: 1.0 - wrong_cells as f64 / (n * c) as f64,
        one_minus_rl: 1.0 - rl / with_both as f64,
        auc: auc / labels as f64,
        oe: oe / k,
        cov: cov / k,
        n_eval: n,
        skipped,
    })
}
