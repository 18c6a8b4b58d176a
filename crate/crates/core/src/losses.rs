//! Training objectives, quality targets and view fusion.
//!
//! Differentiable quantities arrive as [`Var`]s; masks, labels and
//! correlation matrices are plain [`Matrix`] constants.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::dataset::LabelGraph;
use crate::error::{Error, Result};
use crate::nd::{Matrix, Var, EPS};

/// Penalty weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the graph-embedding loss.
    pub alpha: f64,
    /// Schedule base: the aggregation loss is weighted by `1 - beta^t`.
    pub beta: f64,
    /// Weight of the reconstruction loss.
    pub gamma: f64,
    /// Label correlation truncation threshold.
    pub sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.97,
            gamma: 0.1,
            sigma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::contract(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::contract(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !unit.contains(&self.beta) {
            return Err(Error::contract(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        if !unit.contains(&self.sigma) {
            return Err(Error::contract(format!(
                "sigma must lie in [0, 1], got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// `1 - beta^t`, with epochs counted from 1.
pub fn ma_coefficient(beta: f64, epoch: usize) -> f64 {
    1.0 - beta.powi(epoch as i32)
}

fn check_views(a: &[Var<'_>], b: &[Var<'_>], w: &Matrix, op: &str) -> Result<()> {
    if a.len() != w.cols() || (!b.is_empty() && b.len() != a.len()) {
        return Err(Error::contract(format!(
            "{op}: {} views against a mask with {} columns",
            a.len(),
            w.cols()
        )));
    }
    for z in a {
        if z.shape().0 != w.rows() {
            return Err(Error::contract(format!(
                "{op}: {} rows against a mask with {} rows",
                z.shape().0,
                w.rows()
            )));
        }
    }
    Ok(())
}

/// Availability-weighted mean squared reconstruction error.
///
/// Each view is normalized by `d_v * n_b` whatever its availability.
pub fn loss_re<'t>(inputs: &[Var<'t>], recons: &[Var<'t>], w: &Matrix) -> Result<Var<'t>> {
    check_views(inputs, recons, w, "loss_re")?;
    let m = inputs.len();
    let tape = inputs[0].tape();
    let mut total = tape.scalar(0.0);
    for v in 0..m {
        let (n, d) = inputs[v].shape();
        let diff = inputs[v].sub(recons[v])?;
        let per_row = diff.mul(diff)?.row_sum();
        let term = per_row
            .mul(tape.constant(w.column(v)))?
            .sum()
            .scale(1.0 / (d * n) as f64);
        total = total.add(term)?;
    }
    Ok(total.scale(1.0 / m as f64))
}

/// Squared distance between l2-normalized embeddings of the same sample,
/// summed over ordered view pairs with both views present.
pub fn loss_ma<'t>(embeddings: &[Var<'t>], w: &Matrix) -> Result<Var<'t>> {
    check_views(embeddings, &[], w, "loss_ma")?;
    let tape = embeddings[0].tape();
    let d_e = embeddings[0].shape().1 as f64;
    let unit: Vec<Var<'t>> = embeddings.iter().map(|z| z.l2_normalize_rows()).collect();
    let mut total = tape.scalar(0.0);
    for u in 0..unit.len() {
        for v in 0..unit.len() {
            if u == v {
                continue;
            }
            let both = Matrix::from_fn(w.rows(), 1, |i, _| w[(i, u)] * w[(i, v)]);
            let count = both.sum();
            if count == 0.0 {
                continue;
            }
            let diff = unit[u].sub(unit[v])?;
            let term = diff
                .mul(diff)?
                .row_sum()
                .mul(tape.constant(both))?
                .sum()
                .scale(1.0 / (count * d_e));
            total = total.add(term)?;
        }
    }
    Ok(total)
}

/// Cross-entropy between the label graph and each view's cosine graph
/// `F = (cos + 1) / 2`, over ordered pairs `i != j` with both views present
/// and a valid label-graph entry.
///
/// For unit rows `u`, `F = |u_i + u_j|^2 / 4` and `1 - F = |u_i - u_j|^2 / 4`;
/// evaluating both sides this way avoids cancellation near `F = 0` and `F = 1`.
pub fn loss_ge<'t>(embeddings: &[Var<'t>], graph: &LabelGraph, w: &Matrix) -> Result<Var<'t>> {
    check_views(embeddings, &[], w, "loss_ge")?;
    let n = w.rows();
    if graph.similarity.shape() != (n, n) || graph.valid.shape() != (n, n) {
        return Err(Error::contract(format!(
            "loss_ge: label graph {:?} for a batch of {n}",
            graph.similarity.shape()
        )));
    }
    let m = embeddings.len();
    let tape = embeddings[0].tape();
    let mut total = tape.scalar(0.0);
    for (v, z) in embeddings.iter().enumerate() {
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && w[(i, v)] * w[(j, v)] * graph.valid[(i, j)] != 0.0)
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let k = pairs.len();
        let pairs = Rc::new(pairs);
        let unit = z.l2_normalize_rows();
        let f = unit.pair_sq_norms(pairs.clone(), 1.0)?.scale(0.25);
        let f_neg = unit.pair_sq_norms(pairs.clone(), -1.0)?.scale(0.25);
        let target = Matrix::from_fn(k, 1, |r, _| graph.similarity[pairs[r]]);
        let target_neg = tape.constant(target.map(|x| 1.0 - x));
        let ce = tape
            .constant(target)
            .mul(f.log())?
            .add(target_neg.mul(f_neg.log())?)?;
        total = total.add(ce.sum().scale(-1.0 / k as f64))?;
    }
    Ok(total.scale(1.0 / (2 * m) as f64))
}

/// Per-sample, per-view quality targets from the per-view predictions.
///
/// A view's raw score is its mean log-likelihood over the known labels (zero
/// when no label is known); scores are softmax-normalized over the available
/// views. The result is a constant.
pub fn quality_targets(
    per_view: &[Matrix],
    labels: &Matrix,
    label_mask: &Matrix,
    w: &Matrix,
) -> Result<Matrix> {
    labels.check_same_shape(label_mask, "quality_targets")?;
    let (n, c) = labels.shape();
    let m = per_view.len();
    if w.shape() != (n, m) {
        return Err(Error::Dimension {
            op: "quality_targets",
            lhs: w.shape(),
            rhs: (n, m),
        });
    }
    for p in per_view {
        p.check_same_shape(labels, "quality_targets")?;
    }
    let mut q = Matrix::zeros(n, m);
    for i in 0..n {
        let known: f64 = label_mask.row(i).iter().sum();
        let raw: Vec<f64> = per_view
            .iter()
            .map(|p| {
                if known == 0.0 {
                    return 0.0;
                }
                let mut s = 0.0;
                for j in 0..c {
                    let (y, g, pr) = (labels[(i, j)], label_mask[(i, j)], p[(i, j)]);
                    s += (y * pr.max(EPS).ln() + (1.0 - y) * (1.0 - pr).max(EPS).ln()) * g;
                }
                s / known
            })
            .collect();
        let top = (0..m)
            .filter(|&v| w[(i, v)] > 0.0)
            .map(|v| raw[v])
            .fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return Err(Error::contract(format!("sample {i} has no available view")));
        }
        let weights: Vec<f64> = (0..m).map(|v| (raw[v] - top).exp() * w[(i, v)]).collect();
        let total: f64 = weights.iter().sum();
        for v in 0..m {
            q[(i, v)] = weights[v] / total;
        }
    }
    Ok(q)
}

/// Cross-entropy of the discriminator scores against the quality targets.
pub fn loss_qd<'t>(scores: Var<'t>, targets: &Matrix) -> Result<Var<'t>> {
    if scores.shape() != targets.shape() {
        return Err(Error::Dimension {
            op: "loss_qd",
            lhs: scores.shape(),
            rhs: targets.shape(),
        });
    }
    let n = targets.rows().max(1) as f64;
    let q = scores.tape().constant(targets.clone());
    Ok(q.mul(scores.log())?.sum().scale(-1.0 / n))
}

/// Per-sample weighted sum of view embeddings. The scores are detached.
pub fn fuse<'t>(embeddings: &[Var<'t>], scores: Var<'t>) -> Result<Var<'t>> {
    if embeddings.is_empty() || scores.shape() != (embeddings[0].shape().0, embeddings.len()) {
        return Err(Error::contract(format!(
            "fuse: scores {:?} for {} views",
            scores.shape(),
            embeddings.len()
        )));
    }
    let b = scores.detach();
    let mut fused = embeddings[0].mul(b.column(0)?)?;
    for (v, z) in embeddings.iter().enumerate().skip(1) {
        fused = fused.add(z.mul(b.column(v)?)?)?;
    }
    Ok(fused)
}

/// Average of the available views' embeddings.
pub fn fuse_baseline<'t>(embeddings: &[Var<'t>], w: &Matrix) -> Result<Var<'t>> {
    check_views(embeddings, &[], w, "fuse_baseline")?;
    let counts: Vec<f64> = w.iter_rows().map(|r| r.iter().sum()).collect();
    if let Some(i) = counts.iter().position(|&k| k == 0.0) {
        return Err(Error::contract(format!("sample {i} has no available view")));
    }
    let tape = embeddings[0].tape();
    let weight =
        |v: usize| tape.constant(Matrix::from_fn(w.rows(), 1, |i, _| w[(i, v)] / counts[i]));
    let mut fused = embeddings[0].mul(weight(0))?;
    for (v, z) in embeddings.iter().enumerate().skip(1) {
        fused = fused.add(z.mul(weight(v))?)?;
    }
    Ok(fused)
}

fn check_labels(p: Var<'_>, labels: &Matrix, label_mask: &Matrix, op: &'static str) -> Result<()> {
    labels.check_same_shape(label_mask, op)?;
    if p.shape() != labels.shape() {
        return Err(Error::Dimension {
            op,
            lhs: p.shape(),
            rhs: labels.shape(),
        });
    }
    Ok(())
}

/// Binary cross-entropy over the known labels, averaged over all `n_b * c` cells.
pub fn loss_mbce<'t>(p: Var<'t>, labels: &Matrix, label_mask: &Matrix) -> Result<Var<'t>> {
    check_labels(p, labels, label_mask, "loss_mbce")?;
    let tape = p.tape();
    let (n, c) = labels.shape();
    let y = tape.constant(labels.clone());
    let not_y = tape.constant(labels.map(|x| 1.0 - x));
    let ll = y.mul(p.log())?.add(not_y.mul(p.one_minus().log())?)?;
    Ok(ll
        .mul(tape.constant(label_mask.clone()))?
        .sum()
        .scale(-1.0 / (n * c).max(1) as f64))
}

/// Collaborative cross-entropy: each label's self-information is spread over
/// the labels it depends on through the truncated correlation matrix.
pub fn loss_mcce<'t>(
    p: Var<'t>,
    labels: &Matrix,
    label_mask: &Matrix,
    correlation: &Matrix,
) -> Result<Var<'t>> {
    check_labels(p, labels, label_mask, "loss_mcce")?;
    let c = labels.cols();
    if correlation.shape() != (c, c) {
        return Err(Error::Dimension {
            op: "loss_mcce",
            lhs: correlation.shape(),
            rhs: (c, c),
        });
    }
    let tape = p.tape();
    let g = tape.constant(label_mask.clone());
    let info_pos = p.log().neg().mul(g)?;
    let info_neg = p.one_minus().log().neg().mul(g)?;
    let collab_pos = info_pos.matmul(tape.constant(correlation.transpose()))?;
    let collab_neg = info_neg.matmul(tape.constant(correlation.clone()))?;
    let y = tape.constant(labels.clone());
    let not_y = tape.constant(labels.map(|x| 1.0 - x));
    let per_cell = y.mul(collab_pos)?.add(not_y.mul(collab_neg)?)?.mul(g)?;
    Ok(per_cell.sum().scale(1.0 / labels.rows().max(1) as f64))
}

/// Scalar values of every objective term for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_re: f64,
    pub l_ma: f64,
    pub l_ge: f64,
    pub l_qd: f64,
    pub l_mcce: f64,
    pub l_mbce: f64,
    pub l_total: f64,
    pub ma_coefficient: f64,
}

/// Objective terms for one batch; `None` marks a disabled term.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts<'t> {
    pub re: Option<Var<'t>>,
    pub ma: Option<Var<'t>>,
    pub ge: Option<Var<'t>>,
    pub qd: Option<Var<'t>>,
    pub mcce: Option<Var<'t>>,
    pub mbce: Option<Var<'t>>,
}

/// `gamma*re + (1 - beta^t)*ma + alpha*ge + qd + mcce + mbce`.
pub fn total_loss<'t>(
    parts: &LossParts<'t>,
    weights: &LossWeights,
    epoch: usize,
) -> Result<(Var<'t>, LossBreakdown)> {
    let coef = ma_coefficient(weights.beta, epoch);
    let terms = [
        (parts.re, weights.gamma),
        (parts.ma, coef),
        (parts.ge, weights.alpha),
        (parts.qd, 1.0),
        (parts.mcce, 1.0),
        (parts.mbce, 1.0),
    ];
    let mut total: Option<Var<'t>> = None;
    for (term, k) in terms {
        if let Some(t) = term {
            let scaled = t.scale(k);
            total = Some(match total {
                None => scaled,
                Some(acc) => acc.add(scaled)?,
            });
        }
    }
    let total = total.ok_or_else(|| Error::contract("objective has no enabled term"))?;
    let item = |t: Option<Var<'t>>| t.map_or(0.0, |v| v.item());
    let breakdown = LossBreakdown {
        l_re: item(parts.re),
        l_ma: item(parts.ma),
        l_ge: item(parts.ge),
        l_qd: item(parts.qd),
        l_mcce: item(parts.mcce),
        l_mbce: item(parts.mbce),
        l_total: total.item(),
        ma_coefficient: coef,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::label_similarity_graph;
    use crate::nd::{grad_check, RngStream, Tape};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn reconstruction_by_hand() {
        let t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[[1.0, 0.0]]));
        let xr = t.constant(Matrix::zeros(1, 2));
        close(
            loss_re(&[x], &[xr], &Matrix::ones(1, 1)).unwrap().item(),
            0.5,
            1e-12,
        );
        assert_eq!(
            loss_re(&[x], &[xr], &Matrix::zeros(1, 1)).unwrap().item(),
            0.0
        );
        assert_eq!(
            loss_re(&[x], &[x], &Matrix::ones(1, 1)).unwrap().item(),
            0.0
        );
    }

    #[test]
    fn aggregation_by_hand() {
        let t = Tape::new();
        let z1 = t.constant(Matrix::from_rows(&[[1.0, 0.0]]));
        let z2 = t.constant(Matrix::from_rows(&[[0.0, 1.0]]));
        close(
            loss_ma(&[z1, z2], &Matrix::ones(1, 2)).unwrap().item(),
            2.0,
            1e-12,
        );
        assert_eq!(loss_ma(&[z1, z1], &Matrix::ones(1, 2)).unwrap().item(), 0.0);
        let w = Matrix::from_rows(&[[1.0, 0.0]]);
        assert_eq!(loss_ma(&[z1, z2], &w).unwrap().item(), 0.0);
    }

    #[test]
    fn graph_embedding_by_hand() {
        let t = Tape::new();
        // Orthogonal rows give cosine 0, so F = 0.5 off the diagonal.
        let z = t.constant(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let graph = LabelGraph {
            similarity: Matrix::ones(2, 2),
            valid: Matrix::ones(2, 2),
        };
        let l = loss_ge(&[z], &graph, &Matrix::ones(2, 1)).unwrap().item();
        close(l, 2f64.ln() / 2.0, 1e-12);
        close(l, 0.3466, 1e-4);

        let missing = Matrix::from_rows(&[[1.0], [0.0]]);
        assert_eq!(loss_ge(&[z], &graph, &missing).unwrap().item(), 0.0);
    }

    #[test]
    fn graph_embedding_vanishes_on_matching_binary_graph() {
        let t = Tape::new();
        let z = t.constant(Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]));
        let graph = LabelGraph {
            similarity: Matrix::from_rows(&[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
            valid: Matrix::ones(3, 3),
        };
        assert!(loss_ge(&[z], &graph, &Matrix::ones(3, 1)).unwrap().item() < 1e-9);
    }

    #[test]
    fn quality_targets_by_hand() {
        let y = Matrix::from_rows(&[[1.0]]);
        let g = Matrix::ones(1, 1);
        let p1 = Matrix::from_rows(&[[(-0.1f64).exp()]]);
        let p2 = Matrix::from_rows(&[[(-1.0f64).exp()]]);
        let q = quality_targets(&[p1.clone(), p2], &y, &g, &Matrix::ones(1, 2)).unwrap();
        close(q[(0, 0)], 0.7109, 1e-4);
        close(
            q[(0, 0)],
            (-0.1f64).exp() / ((-0.1f64).exp() + (-1.0f64).exp()),
            1e-12,
        );

        let same = quality_targets(&[p1.clone(), p1.clone()], &y, &g, &Matrix::ones(1, 2)).unwrap();
        assert_eq!(same.row(0), &[0.5, 0.5]);
        let single =
            quality_targets(std::slice::from_ref(&p1), &y, &g, &Matrix::ones(1, 1)).unwrap();
        assert_eq!(single, Matrix::ones(1, 1));
    }

    #[test]
    fn quality_targets_without_known_labels_are_uniform_over_available_views() {
        let y = Matrix::zeros(1, 2);
        let g = Matrix::zeros(1, 2);
        let p1 = Matrix::from_rows(&[[0.9, 0.1]]);
        let p2 = Matrix::from_rows(&[[0.2, 0.3]]);
        let p3 = Matrix::from_rows(&[[0.5, 0.5]]);
        let w = Matrix::from_rows(&[[1.0, 0.0, 1.0]]);
        let q = quality_targets(&[p1, p2, p3], &y, &g, &w).unwrap();
        assert_eq!(q.row(0), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn discrimination_by_hand() {
        let t = Tape::new();
        let half = Matrix::filled(1, 2, 0.5);
        close(
            loss_qd(t.constant(half.clone()), &half).unwrap().item(),
            2f64.ln(),
            1e-12,
        );
        let one_hot = Matrix::from_rows(&[[1.0 - EPS, EPS]]);
        let target = Matrix::from_rows(&[[1.0, 0.0]]);
        assert!(loss_qd(t.constant(one_hot), &target).unwrap().item() < 1e-9);

        let q = Matrix::from_rows(&[[0.8, 0.2]]);
        let far = loss_qd(t.constant(Matrix::from_rows(&[[0.3, 0.7]])), &q)
            .unwrap()
            .item();
        let near = loss_qd(t.constant(Matrix::from_rows(&[[0.6, 0.4]])), &q)
            .unwrap()
            .item();
        assert!(near < far);
    }

    #[test]
    fn fusion_by_hand() {
        let t = Tape::new();
        let z1 = t.constant(Matrix::from_rows(&[[2.0, 0.0]]));
        let z2 = t.constant(Matrix::from_rows(&[[0.0, 2.0]]));
        let b = t.constant(Matrix::from_rows(&[[0.5, 0.5]]));
        assert_eq!(
            *fuse(&[z1, z2], b).unwrap().value(),
            Matrix::from_rows(&[[1.0, 1.0]])
        );
        let b = t.constant(Matrix::from_rows(&[[1.0, 0.0]]));
        assert_eq!(*fuse(&[z1, z2], b).unwrap().value(), *z1.value());

        let z2 = t.constant(Matrix::from_rows(&[[0.0, 4.0]]));
        let avg = fuse_baseline(&[z1, z2], &Matrix::ones(1, 2)).unwrap();
        assert_eq!(*avg.value(), Matrix::from_rows(&[[1.0, 2.0]]));
        let pass = fuse_baseline(&[z1, z2], &Matrix::from_rows(&[[1.0, 0.0]])).unwrap();
        assert_eq!(*pass.value(), *z1.value());
        assert!(fuse_baseline(&[z1, z2], &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn fusion_blocks_gradient_into_scores() {
        let t = Tape::new();
        let z1 = t.param(Matrix::from_rows(&[[2.0, 0.0]]));
        let z2 = t.param(Matrix::from_rows(&[[0.0, 2.0]]));
        let b = t.param(Matrix::from_rows(&[[0.3, 0.7]]));
        let out = fuse(&[z1, z2], b).unwrap().sum();
        let grads = t.backward(out).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(*grads.get(z1).unwrap(), Matrix::filled(1, 2, 0.3));
    }

    #[test]
    fn binary_cross_entropy_by_hand() {
        let t = Tape::new();
        let y = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let half = t.constant(Matrix::filled(2, 2, 0.5));
        let full = Matrix::ones(2, 2);
        close(loss_mbce(half, &y, &full).unwrap().item(), 2f64.ln(), 1e-12);
        let exact = t.constant(y.map(|x| x.clamp(EPS, 1.0 - EPS)));
        assert!(loss_mbce(exact, &y, &full).unwrap().item() < 1e-9);
        assert_eq!(
            loss_mbce(half, &y, &Matrix::zeros(2, 2)).unwrap().item(),
            0.0
        );
    }

    #[test]
    fn collaborative_cross_entropy_by_hand() {
        let t = Tape::new();
        let p = t.constant(Matrix::from_rows(&[[0.8, 0.2]]));
        let y = Matrix::from_rows(&[[1.0, 0.0]]);
        let c = Matrix::from_rows(&[[1.0, 0.5], [0.5, 1.0]]);
        let expected = 2.0 * (-(0.8f64.ln()) - 0.5 * 0.2f64.ln());
        let l = loss_mcce(p, &y, &Matrix::ones(1, 2), &c).unwrap().item();
        close(l, expected, 1e-12);
        close(l, 2.0556, 5e-4);

        let exact = t.constant(Matrix::from_rows(&[[1.0 - EPS, EPS]]));
        let l = loss_mcce(exact, &y, &Matrix::ones(1, 2), &Matrix::identity(2)).unwrap();
        assert!(l.item() < 1e-9);
    }

    #[test]
    fn collaborative_reduces_to_binary_with_identity() {
        let mut rng = RngStream::new(21);
        for _ in 0..20 {
            let n = 1 + rng.below(6);
            let c = 1 + rng.below(5);
            let p = rng.uniform_matrix(n, c, 0.01, 0.99);
            let y = Matrix::from_fn(n, c, |_, _| if rng.uniform() < 0.5 { 1.0 } else { 0.0 });
            let g = Matrix::ones(n, c);
            let t = Tape::new();
            let pv = t.constant(p);
            let a = loss_mcce(pv, &y, &g, &Matrix::identity(c)).unwrap().item();
            let b = loss_mbce(pv, &y, &g).unwrap().item();
            close(a, c as f64 * b, 1e-10);
        }
    }

    #[test]
    fn schedule_and_total() {
        close(ma_coefficient(0.97, 1), 0.03, 1e-12);
        for t in 1..50 {
            assert_eq!(ma_coefficient(0.0, t), 1.0);
        }
        let first_half = (1..100).find(|&t| ma_coefficient(0.97, t) >= 0.5).unwrap();
        assert_eq!(first_half, 23);

        let tape = Tape::new();
        let zero = tape.scalar(0.0);
        let parts = LossParts {
            re: Some(zero),
            ma: Some(zero),
            ge: Some(zero),
            qd: Some(zero),
            mcce: Some(zero),
            mbce: None,
        };
        let (total, b) = total_loss(&parts, &LossWeights::default(), 1).unwrap();
        assert_eq!(total.item(), 0.0);
        assert_eq!(b.l_total, 0.0);

        let w = LossWeights::default();
        let parts = LossParts {
            re: Some(tape.scalar(1.5)),
            ma: Some(tape.scalar(2.0)),
            ge: Some(tape.scalar(0.7)),
            qd: Some(tape.scalar(0.3)),
            mcce: Some(tape.scalar(4.0)),
            mbce: None,
        };
        let (_, b) = total_loss(&parts, &w, 5).unwrap();
        let expected =
            w.gamma * b.l_re + b.ma_coefficient * b.l_ma + w.alpha * b.l_ge + b.l_qd + b.l_mcce;
        close(b.l_total, expected, 1e-10);
        assert!(total_loss(&LossParts::default(), &w, 1).is_err());
    }

    #[test]
    fn weights_are_validated() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = [
            LossWeights {
                alpha: -1.0,
                ..Default::default()
            },
            LossWeights {
                gamma: f64::NAN,
                ..Default::default()
            },
            LossWeights {
                beta: 1.2,
                ..Default::default()
            },
            LossWeights {
                sigma: -0.1,
                ..Default::default()
            },
        ];
        for w in bad {
            assert!(w.validate().is_err(), "{w:?}");
        }
    }

    /// Well-conditioned random instance: probabilities away from 0 and 1,
    /// embeddings away from the origin.
    struct Instance {
        embeddings: Vec<Matrix>,
        inputs: Vec<Matrix>,
        probs: Matrix,
        labels: Matrix,
        label_mask: Matrix,
        w: Matrix,
        correlation: Matrix,
    }

    fn instance(rng: &mut RngStream) -> Instance {
        let n = 2 + rng.below(5);
        let m = 2 + rng.below(2);
        let c = 1 + rng.below(4);
        let d = 1 + rng.below(5);
        let embeddings = (0..m)
            .map(|_| rng.normal_matrix(n, 3).map(|x| x + 0.5))
            .collect();
        let inputs = (0..m).map(|_| rng.normal_matrix(n, d)).collect();
        let probs = rng.uniform_matrix(n, c, 0.1, 0.9);
        let labels = Matrix::from_fn(n, c, |_, _| if rng.uniform() < 0.5 { 1.0 } else { 0.0 });
        let label_mask = Matrix::from_fn(n, c, |_, _| if rng.uniform() < 0.7 { 1.0 } else { 0.0 });
        let labels = labels.zip_map(&label_mask, |y, g| y * g).unwrap();
        let mut w = Matrix::from_fn(n, m, |_, _| if rng.uniform() < 0.7 { 1.0 } else { 0.0 });
        for i in 0..n {
            if w.row(i).iter().all(|&x| x == 0.0) {
                w[(i, rng.below(m))] = 1.0;
            }
        }
        let correlation = Matrix::from_fn(c, c, |i, j| if i == j { 1.0 } else { rng.uniform() });
        Instance {
            embeddings,
            inputs,
            probs,
            labels,
            label_mask,
            w,
            correlation,
        }
    }

    #[test]
    fn every_loss_matches_finite_differences() {
        let mut rng = RngStream::new(3);
        for trial in 0..10 {
            let inst = instance(&mut rng);
            let graph = label_similarity_graph(&inst.labels, &inst.label_mask).unwrap();
            let m = inst.embeddings.len();
            let check =
                |name: &str,
                 params: Vec<Matrix>,
                 f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>| {
                    let r = grad_check(&params, f, 1e-5, 1e-4).unwrap();
                    assert!(r.passed(), "{name} trial {trial}: {r:?}");
                };
            check("re", inst.inputs.clone(), &|t, v| {
                let x: Vec<Var<'_>> = inst
                    .inputs
                    .iter()
                    .map(|x| t.constant(x.map(|a| a * 0.5)))
                    .collect();
                loss_re(&x, v, &inst.w)
            });
            check("ma", inst.embeddings.clone(), &|_, v| loss_ma(v, &inst.w));
            check("ge", inst.embeddings.clone(), &|_, v| {
                loss_ge(v, &graph, &inst.w)
            });
            check("mbce", vec![inst.probs.clone()], &|_, v| {
                loss_mbce(v[0], &inst.labels, &inst.label_mask)
            });
            check("mcce", vec![inst.probs.clone()], &|_, v| {
                loss_mcce(v[0], &inst.labels, &inst.label_mask, &inst.correlation)
            });
            let logits = rng.normal_matrix(inst.w.rows(), m);
            let q = quality_targets(
                &vec![inst.probs.clone(); m],
                &inst.labels,
                &inst.label_mask,
                &inst.w,
            )
            .unwrap();
            check("qd", vec![logits], &|_, v| loss_qd(v[0].softmax_rows(), &q));
        }
    }
}
