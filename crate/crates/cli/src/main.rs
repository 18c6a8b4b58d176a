//! `rank`: synthesize, corrupt, train on and evaluate incomplete multi-view
//! multi-label datasets.

/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

mod train;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rank::checks::{grad_suite, quadratic_check};
use rank::dataset::{
    export_correlation_csv, inject_missing, load_dataset, save_dataset, synth_dataset,
    InjectionConfig, Split, SynthConfig,
};
use rank::metrics::write_metrics_json;
use rank::model::load_checkpoint;
use rank::trainer::{check_compatible, evaluate_split};
use rank::Error;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "rank",
    version,
    about = "Incomplete multi-view partial multi-label learning"
)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with latent-class structure.
    Synth(SynthArgs),
    /// Hide views and labels of an existing dataset.
    Inject(InjectArgs),
    /// Train a model and write checkpoints, history.csv and metrics.json.
    Train(train::TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Compare autodiff gradients of every loss against finite differences.
    Gradcheck(GradcheckArgs),
    /// Export the label correlation matrix of a dataset's training rows.
    Correlation(CorrelationArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Number of views.
    #[arg(long, default_value_t = 3)]
    views: usize,
    /// Number of labels.
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Standard deviation of the additive feature noise.
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    /// Comma-separated view widths; defaults to 4*classes + 8*v for view v.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct InjectArgs {
    /// Dataset directory to read.
    #[arg(long)]
    data: PathBuf,
    /// Fraction of samples that lose at least one view.
    #[arg(long, default_value_t = 0.5)]
    view_missing: f64,
    /// Fraction of each label's training entries to hide.
    #[arg(long, default_value_t = 0.5)]
    label_missing: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Random instances per loss term.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Check the quadratic toy loss instead of the model losses.
    #[arg(long)]
    toy: bool,
    #[arg(long, hide = true)]
    negative_control: bool,
}

#[derive(Debug, Args)]
struct CorrelationArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Truncation threshold.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Comma-separated label indices to export; all labels when absent.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<usize>>,
    /// Export the truncated matrix instead of the raw one.
    #[arg(long)]
    truncate: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_io() => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(msg) => f.write_str(msg),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn require_out(out: &Option<PathBuf>) -> Result<&Path, Failure> {
    out.as_deref()
        .ok_or_else(|| Failure::Usage("--out is required for this command".into()))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| {
        Failure::Core(Error::Io {
            path: dir.into(),
            source: e,
        })
    })
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> CmdResult {
    let out = require_out(&cli.out)?;
    let mut cfg = SynthConfig::new(args.n, args.views, args.classes, args.noise, cli.seed);
    if let Some(dims) = &args.dims {
        cfg = cfg.with_dims(dims.clone());
    }
    let synth = synth_dataset(&cfg)?;
    save_dataset(&synth.dataset, out)?;
    say!(
        "wrote {} samples to {}",
        synth.dataset.n_samples(),
        out.display()
    );
    Ok(())
}

fn cmd_inject(cli: &Cli, args: &InjectArgs) -> CmdResult {
    let out = require_out(&cli.out)?;
    let ds = load_dataset(&args.data)?;
    let cfg = InjectionConfig::new(args.view_missing, args.label_missing, cli.seed)?;
    let injected = inject_missing(&ds, &cfg)?;
    save_dataset(&injected, out)?;
    say!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: &'a Path,
    epoch: usize,
    split: String,
    metrics: rank::metrics::MetricsReport,
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> CmdResult {
    let (model, epoch) = load_checkpoint(&args.checkpoint)?;
    let ds = load_dataset(&args.data)?;
    check_compatible(&model, &ds)?;
    let split = Split::from(args.split);
    let report = EvalOutput {
        checkpoint: &args.checkpoint,
        epoch,
        split: split.to_string(),
        metrics: evaluate_split(&model, &ds, split)?,
    };
    if let Some(out) = &cli.out {
        create_dir(out)?;
        write_metrics_json(&report, &out.join("metrics.json"))?;
    }
    say!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs) -> CmdResult {
    let mut ok = true;
    if args.toy {
        let r = quadratic_check(cli.seed, args.step, args.tol)?;
        ok &= r.passed();
        say!(
            "{:<8} max_rel_err={:.3e} {}",
            "toy",
            r.max_rel_err,
            verdict(r.passed())
        );
    } else {
        if args.instances == 0 {
            return Err(Failure::Usage("--instances must be at least 1".into()));
        }
        let suite = grad_suite(
            cli.seed,
            args.instances,
            args.step,
            args.tol,
            args.negative_control,
        )?;
        for s in &suite {
            ok &= s.passed();
            say!(
                "{:<8} instances={} entries={} max_rel_err={:.3e} {}",
                s.term.name(),
                s.instances,
                s.worst.entries_checked,
                s.worst.max_rel_err,
                verdict(s.passed())
            );
        }
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "relative error above tolerance {}",
            args.tol
        )))
    }
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}

fn cmd_correlation(cli: &Cli, args: &CorrelationArgs) -> CmdResult {
    let out = require_out(&cli.out)?;
    let ds = load_dataset(&args.data)?;
    let corr = ds.correlation(args.sigma)?;
    let labels: Vec<usize> = match &args.labels {
        Some(l) => l.clone(),
        None => (0..ds.n_classes()).collect(),
    };
    let matrix = if args.truncate {
        &corr.truncated
    } else {
        &corr.full
    };
    create_dir(out)?;
    let path = out.join("correlation.csv");
    export_correlation_csv(matrix, &labels, &path)?;
    say!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Inject(a) => cmd_inject(cli, a),
        Command::Train(a) => train::cmd_train(cli.seed, require_out(&cli.out)?, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(cli, a),
        Command::Correlation(a) => cmd_correlation(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
