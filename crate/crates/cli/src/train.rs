use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rank::dataset::{load_dataset, MultiViewDataset, Split};
use rank::losses::LossWeights;
use rank::metrics::{evaluate, label_prior_scores, write_metrics_json, MetricsReport};
use rank::model::{save_checkpoint, Fusion, ModelConfig, RankModel};
use rank::trainer::{
    evaluate_split, fit, model_config_for, write_history_csv, Ablation, TrainConfig,
};
use rank::Error;
use serde::Serialize;

use crate::{create_dir, CmdResult, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblateArg {
    NoRe,
    NoMa,
    NoGe,
    NoDiscriminator,
    NoMcce,
    /// Drop reconstruction, aggregation and graph embedding together.
    Backbone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Dynamic,
    MaskedAverage,
}

impl From<FusionArg> for Fusion {
    fn from(f: FusionArg) -> Fusion {
        match f {
            FusionArg::Dynamic => Fusion::Dynamic,
            FusionArg::MaskedAverage => Fusion::MaskedAverage,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Epochs between validation passes; 0 disables them.
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// Weight of the graph-embedding loss.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Base of the aggregation-loss schedule 1 - beta^epoch.
    #[arg(long, default_value_t = 0.97)]
    beta: f64,
    /// Weight of the reconstruction loss.
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Label correlation truncation threshold.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Comma-separated encoder hidden widths; decoders mirror them.
    #[arg(long, value_delimiter = ',', default_value = "512,256")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    embed_dim: usize,
    /// Discriminator hidden width; defaults to max(64, views*embed_dim/4).
    #[arg(long)]
    disc_hidden: Option<usize>,
    /// Components to disable, comma-separated.
    #[arg(long, value_enum, value_delimiter = ',')]
    ablate: Vec<AblateArg>,
    /// Must agree with the ablation: masked-average exactly when the
    /// discriminator is disabled.
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    /// Number of independent runs.
    #[arg(long)]
    repeat: Option<usize>,
    /// Comma-separated seeds, one per run; defaults to seed, seed+1, ...
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

impl TrainArgs {
    fn ablation(&self) -> Ablation {
        let mut a = Ablation::full();
        for flag in &self.ablate {
            match flag {
                AblateArg::NoRe => a.use_re = false,
                AblateArg::NoMa => a.use_ma = false,
                AblateArg::NoGe => a.use_ge = false,
                AblateArg::NoDiscriminator => a.use_discriminator = false,
                AblateArg::NoMcce => a.use_mcce = false,
                AblateArg::Backbone => {
                    a.use_re = false;
                    a.use_ma = false;
                    a.use_ge = false;
                }
            }
        }
        a
    }

    fn train_config(&self, seed: u64) -> Result<TrainConfig, Failure> {
        let ablation = self.ablation();
        if let Some(f) = self.fusion {
            if Fusion::from(f) != ablation.fusion() {
                return Err(Error::Contract(format!(
                    "--fusion {f:?} conflicts with the ablation, which requires {:?}",
                    ablation.fusion()
                ))
                .into());
            }
        }
        let cfg = TrainConfig {
            learning_rate: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
                sigma: self.sigma,
            },
            seed,
            ablation,
            eval_every: self.eval_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn model_config(&self, ds: &MultiViewDataset, cfg: &TrainConfig) -> ModelConfig {
        let mut mc = model_config_for(ds, cfg);
        mc.hidden = self.hidden.clone();
        mc.embed_dim = self.embed_dim;
        mc.disc_hidden = self.disc_hidden;
        mc
    }

    fn seeds(&self, base: u64) -> Result<Vec<u64>, Failure> {
        let seeds = match (&self.seeds, self.repeat) {
            (Some(s), Some(r)) if s.len() != r => {
                return Err(Error::Contract(format!(
                    "--repeat {r} needs {r} seeds, got {}",
                    s.len()
                ))
                .into())
            }
            (Some(s), _) => s.clone(),
            (None, r) => (0..r.unwrap_or(1) as u64).map(|k| base + k).collect(),
        };
        if seeds.is_empty() {
            return Err(Error::Contract("at least one run is required".into()).into());
        }
        if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
            return Err(Error::Contract(format!("seeds must be distinct: {seeds:?}")).into());
        }
        Ok(seeds)
    }
}

#[derive(Serialize)]
struct RunConfig<'a> {
    data: &'a Path,
    train: &'a TrainConfig,
    model: &'a ModelConfig,
}

#[derive(Debug, Clone, Serialize)]
struct RunMetrics {
    seed: u64,
    best_epoch: usize,
    test: MetricsReport,
    label_prior: MetricsReport,
}

/// The six headline metrics, used for cross-run summaries.
#[derive(Debug, Clone, Copy, Serialize)]
struct Summary {
    ap: f64,
    one_minus_hl: f64,
    one_minus_rl: f64,
    auc: f64,
    oe: f64,
    cov: f64,
}

impl Summary {
    fn from_columns(cols: [Vec<f64>; 6], f: impl Fn(&[f64]) -> f64) -> Self {
        Summary {
            ap: f(&cols[0]),
            one_minus_hl: f(&cols[1]),
            one_minus_rl: f(&cols[2]),
            auc: f(&cols[3]),
            oe: f(&cols[4]),
            cov: f(&cols[5]),
        }
    }
}

#[derive(Serialize)]
struct Aggregate {
    runs: Vec<RunMetrics>,
    mean: Summary,
    stddev: Summary,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_stddev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn aggregate(runs: Vec<RunMetrics>) -> Aggregate {
    let columns = || {
        let pick = |f: fn(&MetricsReport) -> f64| runs.iter().map(|r| f(&r.test)).collect();
        [
            pick(|m| m.ap),
            pick(|m| m.one_minus_hl),
            pick(|m| m.one_minus_rl),
            pick(|m| m.auc),
            pick(|m| m.oe),
            pick(|m| m.cov),
        ]
    };
    Aggregate {
        mean: Summary::from_columns(columns(), mean),
        stddev: Summary::from_columns(columns(), sample_stddev),
        runs,
    }
}

fn prior_report(ds: &MultiViewDataset) -> rank::Result<MetricsReport> {
    let train = ds.batch(&ds.indices(Split::Train));
    let test = ds.batch(&ds.indices(Split::Test));
    let scores = label_prior_scores(&train.labels, &train.label_mask, test.labels.rows())?;
    evaluate(&scores, &test.labels)
}

fn run_once(
    args: &TrainArgs,
    ds: &MultiViewDataset,
    seed: u64,
    dir: &Path,
) -> Result<Option<RunMetrics>, Failure> {
    let cfg = args.train_config(seed)?;
    let mc = args.model_config(ds, &cfg);
    let model = RankModel::init(mc.clone())?;
    create_dir(dir)?;
    let config = RunConfig {
        data: &args.data,
        train: &cfg,
        model: &mc,
    };
    write_metrics_json(&config, &dir.join("config.json"))?;
    if cfg.epochs == 0 {
        save_checkpoint(&model, 0, &dir.join("checkpoint"))?;
        return Ok(None);
    }
    let result = fit(ds, model, &cfg)?;
    save_checkpoint(
        &result.best_model,
        result.best_epoch,
        &dir.join("checkpoint"),
    )?;
    save_checkpoint(&result.final_model, cfg.epochs, &dir.join("final"))?;
    write_history_csv(&result.history, &cfg.ablation, &dir.join("history.csv"))?;
    let metrics = RunMetrics {
        seed,
        best_epoch: result.best_epoch,
        test: evaluate_split(&result.best_model, ds, Split::Test)?,
        label_prior: prior_report(ds)?,
    };
    write_metrics_json(&metrics, &dir.join("metrics.json"))?;
    Ok(Some(metrics))
}

pub fn cmd_train(seed: u64, out: &Path, args: &TrainArgs) -> CmdResult {
    let seeds = args.seeds(seed)?;
    // Surface configuration conflicts before touching the filesystem.
    args.train_config(seeds[0])?;
    let ds = load_dataset(&args.data)?;
    if let [only] = seeds[..] {
        match run_once(args, &ds, only, out)? {
            Some(m) => say!(
                "seed {only}: test AP {:.4} (best epoch {})",
                m.test.ap,
                m.best_epoch
            ),
            None => say!("wrote initialized checkpoint to {}", out.display()),
        }
        return Ok(());
    }
    let mut runs = Vec::new();
    for &s in &seeds {
        if let Some(m) = run_once(args, &ds, s, &out.join(format!("run_{s}")))? {
            say!(
                "seed {s}: test AP {:.4} (best epoch {})",
                m.test.ap,
                m.best_epoch
            );
            runs.push(m);
        }
    }
    if !runs.is_empty() {
        let agg = aggregate(runs);
        write_metrics_json(&agg, &out.join("metrics.json"))?;
        say!("mean test AP {:.4} +/- {:.4}", agg.mean.ap, agg.stddev.ap);
    }
    Ok(())
}
