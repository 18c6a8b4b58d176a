//! Mini-batch SGD with momentum over the composite objective.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{label_similarity_graph, Batch, MultiViewDataset, Split};
use crate::error::{Error, Result};
use crate::losses::{
    loss_ge, loss_ma, loss_mbce, loss_mcce, loss_qd, loss_re, quality_targets, total_loss,
    LossBreakdown, LossParts, LossWeights,
};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{BoundModel, FrozenFusion, Fusion, ModelConfig, RankModel};
use crate::nd::{Matrix, RngStream, Tape, Var};

/// Which objective terms and components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_re: bool,
    pub use_ma: bool,
    pub use_ge: bool,
    /// Off: masked-average fusion and no discrimination loss.
    pub use_discriminator: bool,
    /// Off: plain binary cross-entropy instead of the collaborative loss.
    pub use_mcce: bool,
}

impl Ablation {
    pub fn full() -> Self {
        Ablation {
            use_re: true,
            use_ma: true,
            use_ge: true,
            use_discriminator: true,
            use_mcce: true,
        }
    }

    /// Only the discriminator and the classification loss.
    pub fn backbone() -> Self {
        Ablation {
            use_re: false,
            use_ma: false,
            use_ge: false,
            ..Ablation::full()
        }
    }

    pub fn fusion(&self) -> Fusion {
        if self.use_discriminator {
            Fusion::Dynamic
        } else {
            Fusion::MaskedAverage
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::full()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub ablation: Ablation,
    /// Epochs between validation passes; 0 disables them.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 128,
            epochs: 200,
            weights: LossWeights::default(),
            seed: 0,
            ablation: Ablation::full(),
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        self.weights.validate()
    }
}

/// Mean loss terms of one epoch and, when evaluated, validation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub validation: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: RankModel,
    /// One buffer per parameter matrix, in [`RankModel::params`] order.
    pub velocity: Vec<Matrix>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Validation AP, epoch and parameters of the best snapshot so far.
    pub best: Option<(f64, usize, RankModel)>,
    correlation: Matrix,
    rng: RngStream,
}

impl TrainState {
    /// Fresh state; the truncated label correlation comes from the training rows.
    pub fn new(model: RankModel, dataset: &MultiViewDataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_compatible(&model, dataset)?;
        if model.config.fusion != cfg.ablation.fusion() {
            return Err(Error::contract(format!(
                "model fusion {:?} conflicts with use_discriminator = {}",
                model.config.fusion, cfg.ablation.use_discriminator
            )));
        }
        let correlation = dataset.correlation(cfg.weights.sigma)?.truncated;
        let velocity = model
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Ok(TrainState {
            model,
            velocity,
            epoch: 0,
            history: Vec::new(),
            best: None,
            correlation,
            rng: RngStream::new(cfg.seed).fork(0x74_7261_696e),
        })
    }

    pub fn correlation(&self) -> &Matrix {
        &self.correlation
    }
}

pub fn check_compatible(model: &RankModel, dataset: &MultiViewDataset) -> Result<()> {
    let dims = dataset.view_dims();
    if model.config.view_dims != dims || model.config.classes != dataset.n_classes() {
        return Err(Error::contract(format!(
            "model expects views {:?} and {} classes, dataset has {:?} and {}",
            model.config.view_dims,
            model.config.classes,
            dims,
            dataset.n_classes()
        )));
    }
    Ok(())
}

/// Constants of one batch objective: detached fusion inputs and quality targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub fusion: Option<FrozenFusion>,
    pub targets: Option<Matrix>,
}

/// Every enabled objective term for one batch, plus the detached values it used.
///
/// Passing `frozen` replaces the detached values with fixed ones, so the
/// terms become plain functions of the parameters.
pub fn objective_parts<'t>(
    tape: &'t Tape,
    bound: &BoundModel<'t>,
    batch: &Batch,
    correlation: &Matrix,
    ablation: &Ablation,
    frozen: Option<&Frozen>,
) -> Result<(LossParts<'t>, Frozen)> {
    let inputs: Vec<_> = batch
        .views
        .iter()
        .map(|x| tape.constant(x.clone()))
        .collect();
    let out = bound.forward_frozen(
        &inputs,
        &batch.view_mask,
        frozen.and_then(|f| f.fusion.as_ref()),
    )?;
    let z = &out.embeddings;
    let mut parts = LossParts::default();

    if ablation.use_re {
        let recons = z
            .iter()
            .enumerate()
            .map(|(v, &e)| bound.decode(v, e))
            .collect::<Result<Vec<_>>>()?;
        parts.re = Some(loss_re(&inputs, &recons, &batch.view_mask)?);
    }
    if ablation.use_ma && z.len() > 1 {
        parts.ma = Some(loss_ma(z, &batch.view_mask)?);
    }
    if ablation.use_ge {
        let graph = label_similarity_graph(&batch.labels, &batch.label_mask)?;
        parts.ge = Some(loss_ge(z, &graph, &batch.view_mask)?);
    }
    let mut targets = None;
    if let Some(scores) = out.scores {
        let q = match frozen.and_then(|f| f.targets.clone()) {
            Some(q) => q,
            None => {
                let per_view = z
                    .iter()
                    .map(|e| Ok((*bound.classify(e.detach())?.value()).clone()))
                    .collect::<Result<Vec<_>>>()?;
                quality_targets(
                    &per_view,
                    &batch.labels,
                    &batch.label_mask,
                    &batch.view_mask,
                )?
            }
        };
        parts.qd = Some(loss_qd(scores, &q)?);
        targets = Some(q);
    }
    if ablation.use_mcce {
        parts.mcce = Some(loss_mcce(
            out.prediction,
            &batch.labels,
            &batch.label_mask,
            correlation,
        )?);
    } else {
        parts.mbce = Some(loss_mbce(out.prediction, &batch.labels, &batch.label_mask)?);
    }
    let used = Frozen {
        fusion: out.frozen_fusion(),
        targets,
    };
    Ok((parts, used))
}

/// The composite objective for one batch at `epoch`.
pub fn batch_objective<'t>(
    tape: &'t Tape,
    bound: &BoundModel<'t>,
    batch: &Batch,
    correlation: &Matrix,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(Var<'t>, LossBreakdown)> {
    let (parts, _) = objective_parts(tape, bound, batch, correlation, &cfg.ablation, None)?;
    total_loss(&parts, &cfg.weights, epoch)
}

/// Classical momentum: `v <- mu v - lr g`, `theta <- theta + v`.
///
/// A parameter with no gradient and zero velocity is left untouched.
pub fn momentum_step(
    params: Vec<&mut Matrix>,
    velocity: &mut [Matrix],
    grads: &[Option<Matrix>],
    learning_rate: f64,
    momentum: f64,
) {
    for ((theta, v), g) in params.into_iter().zip(velocity.iter_mut()).zip(grads) {
        match g {
            Some(g) => {
                for ((t, vel), &gr) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vel = momentum * *vel - learning_rate * gr;
                    *t += *vel;
                }
            }
            None => {
                if v.data().iter().all(|&x| x == 0.0) {
                    continue;
                }
                for (t, vel) in theta.data_mut().iter_mut().zip(v.data_mut()) {
                    *vel *= momentum;
                    *t += *vel;
                }
            }
        }
    }
}

/// One pass over the shuffled training rows; returns the batch-mean breakdown.
pub fn train_epoch(
    state: &mut TrainState,
    dataset: &MultiViewDataset,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut rows = dataset.indices(Split::Train);
    if rows.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    state.rng.shuffle(&mut rows);
    let epoch = state.epoch + 1;
    let mut sum = LossBreakdown::default();
    let mut batches = 0usize;
    for chunk in rows.chunks(cfg.batch_size) {
        let batch = dataset.batch(chunk);
        let tape = Tape::new();
        let bound = state.model.bind(&tape);
        let (total, parts) =
            batch_objective(&tape, &bound, &batch, &state.correlation, cfg, epoch)?;
        if !parts.l_total.is_finite() {
            return Err(Error::contract(format!(
                "objective diverged at epoch {epoch}"
            )));
        }
        let grads = tape.backward(total)?;
        let g: Vec<Option<Matrix>> = bound
            .param_vars()
            .into_iter()
            .map(|v| grads.get(v).cloned())
            .collect();
        momentum_step(
            state.model.params_mut(),
            &mut state.velocity,
            &g,
            cfg.learning_rate,
            cfg.momentum,
        );
        accumulate(&mut sum, &parts);
        batches += 1;
    }
    let k = batches as f64;
    let mean = LossBreakdown {
        l_re: sum.l_re / k,
        l_ma: sum.l_ma / k,
        l_ge: sum.l_ge / k,
        l_qd: sum.l_qd / k,
        l_mcce: sum.l_mcce / k,
        l_mbce: sum.l_mbce / k,
        l_total: sum.l_total / k,
        ma_coefficient: sum.ma_coefficient / k,
    };
    state.epoch = epoch;
    Ok(mean)
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.l_re += b.l_re;
    acc.l_ma += b.l_ma;
    acc.l_ge += b.l_ge;
    acc.l_qd += b.l_qd;
    acc.l_mcce += b.l_mcce;
    acc.l_mbce += b.l_mbce;
    acc.l_total += b.l_total;
    acc.ma_coefficient += b.ma_coefficient;
}

const PREDICT_CHUNK: usize = 1024;

/// Label probabilities for the rows of `split`, in dataset order.
pub fn predict(model: &RankModel, dataset: &MultiViewDataset, split: Split) -> Result<Matrix> {
    predict_rows(model, dataset, &dataset.indices(split))
}

pub fn predict_rows(
    model: &RankModel,
    dataset: &MultiViewDataset,
    rows: &[usize],
) -> Result<Matrix> {
    check_compatible(model, dataset)?;
    let c = dataset.n_classes();
    let mut data = Vec::with_capacity(rows.len() * c);
    for chunk in rows.chunks(PREDICT_CHUNK) {
        let batch = dataset.batch(chunk);
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let inputs: Vec<_> = batch
            .views
            .iter()
            .map(|x| tape.constant(x.clone()))
            .collect();
        let out = bound.forward(&inputs, &batch.view_mask)?;
        data.extend_from_slice(out.prediction.value().data());
    }
    Matrix::new(rows.len(), c, data)
}

/// Metrics of `model` on `split`.
pub fn evaluate_split(
    model: &RankModel,
    dataset: &MultiViewDataset,
    split: Split,
) -> Result<MetricsReport> {
    let rows = dataset.indices(split);
    let p = predict_rows(model, dataset, &rows)?;
    evaluate(&p, &dataset.labels().select_rows(&rows))
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub final_model: RankModel,
    /// Snapshot with the best validation AP; the final model when never evaluated.
    pub best_model: RankModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Model configuration matching `dataset` and the ablation's fusion mode.
pub fn model_config_for(dataset: &MultiViewDataset, cfg: &TrainConfig) -> ModelConfig {
    let mut mc = ModelConfig::new(dataset.view_dims(), dataset.n_classes(), cfg.seed);
    mc.fusion = cfg.ablation.fusion();
    mc
}

/// Trains for `cfg.epochs` epochs, keeping the best validation snapshot.
pub fn fit(dataset: &MultiViewDataset, model: RankModel, cfg: &TrainConfig) -> Result<FitResult> {
    let mut state = TrainState::new(model, dataset, cfg)?;
    let has_val = !dataset.indices(Split::Val).is_empty();
    for _ in 0..cfg.epochs {
        let losses = train_epoch(&mut state, dataset, cfg)?;
        let due =
            cfg.eval_every > 0 && (state.epoch % cfg.eval_every == 0 || state.epoch == cfg.epochs);
        let validation = if has_val && due {
            Some(evaluate_split(&state.model, dataset, Split::Val)?)
        } else {
            None
        };
        if let Some(report) = &validation {
            if state.best.as_ref().is_none_or(|(ap, _, _)| report.ap > *ap) {
                state.best = Some((report.ap, state.epoch, state.model.clone()));
            }
        }
        state.history.push(EpochRecord {
            epoch: state.epoch,
            losses,
            validation,
        });
    }
    let (best_model, best_epoch) = match state.best {
        Some((_, epoch, m)) => (m, epoch),
        None => (state.model.clone(), state.epoch),
    };
    Ok(FitResult {
        final_model: state.model,
        best_model,
        best_epoch,
        history: state.history,
    })
}

/// Renders the per-epoch history as CSV. The classification column is
/// `l_mbce` when the collaborative loss is disabled.
pub fn history_csv(history: &[EpochRecord], ablation: &Ablation) -> String {
    let cls = if ablation.use_mcce {
        "l_mcce"
    } else {
        "l_mbce"
    };
    let mut out = format!(
        "epoch,l_re,l_ma,l_ge,l_qd,{cls},l_total,ma_coefficient,\
         val_ap,val_one_minus_hl,val_one_minus_rl,val_auc,val_oe,val_cov\n"
    );
    for r in history {
        let l = &r.losses;
        let cls_value = if ablation.use_mcce {
            l.l_mcce
        } else {
            l.l_mbce
        };
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, l.l_re, l.l_ma, l.l_ge, l.l_qd, cls_value, l.l_total, l.ma_coefficient
        );
        match &r.validation {
            Some(v) => {
                let _ = writeln!(
                    out,
                    ",{},{},{},{},{},{}",
                    v.ap, v.one_minus_hl, v.one_minus_rl, v.auc, v.oe, v.cov
                );
            }
            None => out.push_str(",,,,,,\n"),
        }
    }
    out
}

pub fn write_history_csv(history: &[EpochRecord], ablation: &Ablation, path: &Path) -> Result<()> {
    fs::write(path, history_csv(history, ablation)).map_err(|e| Error::io(path, e))
}
