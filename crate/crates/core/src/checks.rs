//! Finite-difference checks of every objective term on tiny random instances.

use std::fmt;

use crate::dataset::{build_correlation, label_similarity_graph, truncate_correlation, Batch};
use crate::error::Result;
use crate::losses::{loss_ge, loss_mbce, loss_mcce, ma_coefficient, quality_targets, LossWeights};
use crate::model::{ModelConfig, ParamGroup, RankModel};
use crate::nd::{grad_check, grad_check_terms, GradCheckReport, Matrix, RngStream, Tape, Var};
use crate::trainer::{objective_parts, Ablation, Frozen};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Reconstruction,
    Aggregation,
    GraphEmbedding,
    QualityDiscrimination,
    BinaryCrossEntropy,
    CollaborativeCrossEntropy,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::Reconstruction,
        LossTerm::Aggregation,
        LossTerm::GraphEmbedding,
        LossTerm::QualityDiscrimination,
        LossTerm::BinaryCrossEntropy,
        LossTerm::CollaborativeCrossEntropy,
        LossTerm::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Reconstruction => "l_re",
            LossTerm::Aggregation => "l_ma",
            LossTerm::GraphEmbedding => "l_ge",
            LossTerm::QualityDiscrimination => "l_qd",
            LossTerm::BinaryCrossEntropy => "l_mbce",
            LossTerm::CollaborativeCrossEntropy => "l_mcce",
            LossTerm::Total => "l_total",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A small model together with one batch to evaluate it on.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub model: RankModel,
    pub batch: Batch,
    pub correlation: Matrix,
}

fn pick(v: Option<Var<'_>>) -> Var<'_> {
    v.expect("term enabled by the ablation")
}

fn bernoulli(rng: &mut RngStream, rows: usize, cols: usize, p: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| if rng.uniform() < p { 1.0 } else { 0.0 })
}

/// Up to 6 samples, 2 to 3 views of width at most 5, and at most 4 labels,
/// with random biases.
pub fn tiny_instance(rng: &mut RngStream) -> Result<TinyInstance> {
    let n = 2 + rng.below(5);
    let m = 2 + rng.below(2);
    let c = 1 + rng.below(4);
    let dims: Vec<usize> = (0..m).map(|_| 1 + rng.below(5)).collect();

    let mut view_mask = bernoulli(rng, n, m, 0.7);
    for i in 0..n {
        if view_mask.row(i).iter().all(|&x| x == 0.0) {
            view_mask[(i, rng.below(m))] = 1.0;
        }
    }
    let label_mask = bernoulli(rng, n, c, 0.75);
    let labels = bernoulli(rng, n, c, 0.5).zip_map(&label_mask, |y, g| y * g)?;
    let views = dims.iter().map(|&d| rng.normal_matrix(n, d)).collect();
    let correlation = truncate_correlation(&build_correlation(&labels), 0.1)?;

    let mut cfg = ModelConfig::new(dims, c, rng.below(1 << 30) as u64);
    cfg.hidden = vec![4];
    cfg.embed_dim = 3;
    cfg.disc_hidden = Some(5);
    let mut model = RankModel::init(cfg)?;
    // Nonzero biases keep relu inputs off their kink.
    let names = model.param_info();
    for ((name, _), p) in names.iter().zip(model.params_mut()) {
        if name.contains("_b") {
            *p = rng.uniform_matrix(p.rows(), p.cols(), -0.5, 0.5);
        }
    }
    Ok(TinyInstance {
        model,
        batch: Batch {
            views,
            labels,
            view_mask,
            label_mask,
        },
        correlation,
    })
}

/// Compares the tape gradient of `term` against central differences over
/// every model parameter, with detached quantities held at their values at
/// the unperturbed parameters.
///
/// `sabotage` squares the term while detaching one factor, which halves the
/// reported gradient; it exists to show the check can fail.
pub fn check_term(
    inst: &TinyInstance,
    term: LossTerm,
    step: f64,
    tol: f64,
    sabotage: bool,
) -> Result<GradCheckReport> {
    let ablation = Ablation {
        use_mcce: term != LossTerm::BinaryCrossEntropy,
        ..Ablation::full()
    };
    let weights = LossWeights {
        alpha: 0.7,
        beta: 0.9,
        gamma: 0.4,
        sigma: 0.1,
    };
    let frozen: Frozen = {
        let tape = Tape::new();
        let bound = inst.model.bind(&tape);
        objective_parts(
            &tape,
            &bound,
            &inst.batch,
            &inst.correlation,
            &ablation,
            None,
        )?
        .1
    };
    let params: Vec<Matrix> = inst.model.params().into_iter().cloned().collect();
    grad_check_terms(
        &params,
        |tape, vars| {
            let bound = inst.model.bind_vars(vars)?;
            let (parts, _) = objective_parts(
                tape,
                &bound,
                &inst.batch,
                &inst.correlation,
                &ablation,
                Some(&frozen),
            )?;
            let terms: Vec<Var<'_>> = match term {
                LossTerm::Reconstruction => vec![pick(parts.re)],
                LossTerm::Aggregation => vec![pick(parts.ma)],
                LossTerm::GraphEmbedding => vec![pick(parts.ge)],
                LossTerm::QualityDiscrimination => vec![pick(parts.qd)],
                LossTerm::BinaryCrossEntropy => vec![pick(parts.mbce)],
                LossTerm::CollaborativeCrossEntropy => vec![pick(parts.mcce)],
                LossTerm::Total => vec![
                    pick(parts.re).scale(weights.gamma),
                    pick(parts.ma).scale(ma_coefficient(weights.beta, 3)),
                    pick(parts.ge).scale(weights.alpha),
                    pick(parts.qd),
                    pick(parts.mcce),
                ],
            };
            if sabotage {
                terms.into_iter().map(|t| t.mul(t.detach())).collect()
            } else {
                Ok(terms)
            }
        },
        step,
        tol,
    )
}

/// Worst result of one term over several instances.
#[derive(Debug, Clone, PartialEq)]
pub struct TermSummary {
    pub term: LossTerm,
    pub instances: usize,
    pub worst: GradCheckReport,
}

impl TermSummary {
    pub fn passed(&self) -> bool {
        self.worst.passed()
    }
}

/// Runs [`check_term`] for every term on `instances` fresh random instances.
pub fn grad_suite(
    seed: u64,
    instances: usize,
    step: f64,
    tol: f64,
    sabotage: bool,
) -> Result<Vec<TermSummary>> {
    let mut rng = RngStream::new(seed);
    let pool = (0..instances)
        .map(|_| tiny_instance(&mut rng))
        .collect::<Result<Vec<_>>>()?;
    LossTerm::ALL
        .iter()
        .map(|&term| {
            let mut worst: Option<GradCheckReport> = None;
            for inst in &pool {
                let r = check_term(inst, term, step, tol, sabotage)?;
                if worst.as_ref().is_none_or(|w| r.max_rel_err > w.max_rel_err) {
                    worst = Some(r);
                }
            }
            Ok(TermSummary {
                term,
                instances,
                worst: worst.unwrap_or(GradCheckReport {
                    max_rel_err: 0.0,
                    worst: None,
                    entries_checked: 0,
                    tol,
                }),
            })
        })
        .collect()
}

/// `sum(x^2)`, whose central difference is exact up to rounding.
pub fn quadratic_check(seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    let x = RngStream::new(seed).normal_matrix(3, 4);
    grad_check(&[x], |_, v| Ok(v[0].mul(v[0])?.sum()), step, tol)
}

/// One quantity evaluated before and after perturbing only masked inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedComparison {
    pub term: &'static str,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

impl MaskedComparison {
    /// Bitwise equality of every value.
    pub fn unchanged(&self) -> bool {
        self.before.len() == self.after.len()
            && self
                .before
                .iter()
                .zip(&self.after)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// A tiny instance guaranteed to contain a missing view, a hidden label
/// and a sample with no known label.
fn masked_instance(rng: &mut RngStream) -> Result<TinyInstance> {
    let mut inst = tiny_instance(rng)?;
    let b = &mut inst.batch;
    let (n, m) = b.view_mask.shape();
    let c = b.labels.cols();
    let i = rng.below(n);
    let v = rng.below(m);
    b.view_mask[(i, v)] = 0.0;
    b.view_mask[(i, (v + 1) % m)] = 1.0;
    let (i, j) = (rng.below(n), rng.below(c));
    b.label_mask[(i, j)] = 0.0;
    let blank = rng.below(n);
    b.label_mask.row_mut(blank).fill(0.0);
    b.labels = b.labels.zip_map(&b.label_mask, |y, g| y * g)?;
    Ok(inst)
}

/// Replaces every entry of `target` where `mask` is zero.
fn scramble(target: &mut Matrix, mask: &Matrix, mut draw: impl FnMut() -> f64) {
    for (t, &g) in target.data_mut().iter_mut().zip(mask.data()) {
        if g == 0.0 {
            *t = draw();
        }
    }
}

fn compare(term: &'static str, before: Vec<f64>, after: Vec<f64>) -> MaskedComparison {
    MaskedComparison {
        term,
        before,
        after,
    }
}

/// Perturbs one random instance at masked positions only and reports every
/// affected quantity before and after: features of missing views for the
/// view losses, hidden label cells for the label losses and quality
/// targets, and invalid pairs of the label graph for the graph loss.
pub fn masking_case(rng: &mut RngStream) -> Result<Vec<MaskedComparison>> {
    let inst = masked_instance(rng)?;
    let b = &inst.batch;
    let (n, c) = b.labels.shape();
    let m = b.views.len();
    let mut out = Vec::new();

    let mut noisy = b.clone();
    for (v, x) in noisy.views.iter_mut().enumerate() {
        let row_mask = Matrix::from_fn(x.rows(), x.cols(), |i, _| b.view_mask[(i, v)]);
        scramble(x, &row_mask, || 10.0 * rng.normal());
    }
    let view_terms = |batch: &Batch| -> Result<[f64; 3]> {
        let tape = Tape::new();
        let bound = inst.model.bind(&tape);
        let (p, _) = objective_parts(
            &tape,
            &bound,
            batch,
            &inst.correlation,
            &Ablation::full(),
            None,
        )?;
        Ok([pick(p.re).item(), pick(p.ma).item(), pick(p.ge).item()])
    };
    let (clean, dirty) = (view_terms(b)?, view_terms(&noisy)?);
    for (k, term) in ["l_re", "l_ma", "l_ge"].into_iter().enumerate() {
        out.push(compare(term, vec![clean[k]], vec![dirty[k]]));
    }

    let probs = |rng: &mut RngStream| rng.uniform_matrix(n, c, 0.01, 0.99);
    let p = probs(rng);
    let per_view: Vec<Matrix> = (0..m).map(|_| probs(rng)).collect();
    let mut p2 = p.clone();
    scramble(&mut p2, &b.label_mask, || rng.uniform_range(0.01, 0.99));
    let mut y2 = b.labels.clone();
    scramble(&mut y2, &b.label_mask, || {
        if rng.uniform() < 0.5 {
            1.0
        } else {
            0.0
        }
    });
    let mut per_view2 = per_view.clone();
    for q in &mut per_view2 {
        scramble(q, &b.label_mask, || rng.uniform_range(0.01, 0.99));
    }
    let label_terms = |p: &Matrix, y: &Matrix| -> Result<[f64; 2]> {
        let tape = Tape::new();
        let pv = tape.constant(p.clone());
        Ok([
            loss_mbce(pv, y, &b.label_mask)?.item(),
            loss_mcce(pv, y, &b.label_mask, &inst.correlation)?.item(),
        ])
    };
    let (clean, dirty) = (label_terms(&p, &b.labels)?, label_terms(&p2, &y2)?);
    out.push(compare("l_mbce", vec![clean[0]], vec![dirty[0]]));
    out.push(compare("l_mcce", vec![clean[1]], vec![dirty[1]]));
    let q = quality_targets(&per_view, &b.labels, &b.label_mask, &b.view_mask)?;
    let q2 = quality_targets(&per_view2, &y2, &b.label_mask, &b.view_mask)?;
    out.push(compare("quality_targets", q.into_data(), q2.into_data()));

    let graph = label_similarity_graph(&b.labels, &b.label_mask)?;
    let mut graph2 = graph.clone();
    scramble(&mut graph2.similarity, &graph.valid, || rng.uniform());
    let z: Vec<Matrix> = (0..m).map(|_| rng.normal_matrix(n, 3)).collect();
    let tape = Tape::new();
    let zv: Vec<Var<'_>> = z.iter().map(|z| tape.constant(z.clone())).collect();
    out.push(compare(
        "l_ge_pairs",
        vec![loss_ge(&zv, &graph, &b.view_mask)?.item()],
        vec![loss_ge(&zv, &graph2, &b.view_mask)?.item()],
    ));
    Ok(out)
}

/// Largest gradient magnitudes the stop-gradient contract requires to be zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakReport {
    /// Main objective into discriminator parameters.
    pub main_into_discriminator: f64,
    /// Quality loss into encoder, decoder and classifier parameters.
    pub quality_into_backbone: f64,
    /// Quality loss into discriminator parameters; nonzero shows it trains.
    pub quality_into_discriminator: f64,
}

impl LeakReport {
    pub fn holds(&self) -> bool {
        self.main_into_discriminator == 0.0
            && self.quality_into_backbone == 0.0
            && self.quality_into_discriminator > 0.0
    }
}

pub fn stop_gradient_case(inst: &TinyInstance) -> Result<LeakReport> {
    let weights = LossWeights::default();
    let tape = Tape::new();
    let bound = inst.model.bind(&tape);
    let vars = bound.param_vars();
    let groups: Vec<ParamGroup> = inst
        .model
        .param_info()
        .into_iter()
        .map(|(_, g)| g)
        .collect();
    let (p, _) = objective_parts(
        &tape,
        &bound,
        &inst.batch,
        &inst.correlation,
        &Ablation::full(),
        None,
    )?;
    let main = pick(p.re)
        .scale(weights.gamma)
        .add(pick(p.ma).scale(ma_coefficient(weights.beta, 5)))?
        .add(pick(p.ge).scale(weights.alpha))?
        .add(pick(p.mcce))?;
    let largest = |root: Var<'_>, keep: &dyn Fn(ParamGroup) -> bool| -> Result<f64> {
        let grads = tape.backward(root)?;
        Ok(vars
            .iter()
            .zip(&groups)
            .filter(|(_, &g)| keep(g))
            .filter_map(|(&v, _)| grads.get(v))
            .flat_map(|g| g.data().iter().map(|x| x.abs()))
            .fold(0.0, f64::max))
    };
    let is_disc = |g: ParamGroup| g == ParamGroup::Discriminator;
    Ok(LeakReport {
        main_into_discriminator: largest(main, &is_disc)?,
        quality_into_backbone: largest(pick(p.qd), &|g| !is_disc(g))?,
        quality_into_discriminator: largest(pick(p.qd), &is_disc)?,
    })
}

/// `|L_mcce(P, Y, G=1, C=I) - c * L_mbce(P, Y, G=1)|` on a random instance.
pub fn reduction_gap(rng: &mut RngStream) -> Result<f64> {
    let n = 1 + rng.below(8);
    let c = 1 + rng.below(6);
    let p = rng.uniform_matrix(n, c, 0.001, 0.999);
    let y = bernoulli(rng, n, c, 0.5);
    let g = Matrix::ones(n, c);
    let tape = Tape::new();
    let pv = tape.constant(p);
    let mcce = loss_mcce(pv, &y, &g, &Matrix::identity(c))?.item();
    let mbce = loss_mbce(pv, &y, &g)?.item();
    Ok((mcce - c as f64 * mbce).abs())
}
