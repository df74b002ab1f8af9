use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Combine exported backbone logits: analysis, static and learned ensembles,
/// calibration, cascades and synthetic data.
#[derive(Parser, Debug)]
#[command(name = "logitmix", version)]
struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a manifest and every file it references.
    Validate {
        manifest: PathBuf,
    },
    /// Oracle accuracy, diversity, overlap tables and relative improvement.
    Analyze(AnalyzeArgs),
    /// Non-parametric and calibrated combiners.
    Ensemble(EnsembleArgs),
    /// Fit one temperature per backbone by negative log-likelihood.
    Calibrate(CalibrateArgs),
    /// Fit a learned combiner or a linear probe.
    Train(TrainArgs),
    /// Apply a trained model to a split.
    Predict(PredictArgs),
    /// Confidence-thresholded sequential evaluation.
    Cascade(CascadeArgs),
    /// Sample n examples per class.
    FewshotSplit(FewshotArgs),
    /// Generate a synthetic bundle.
    Synth(SynthArgs),
    /// Aggregate per-run result rows.
    Report(ReportArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Analysis {
    Oracle,
    Diversity,
    Overlap,
    Improvement,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum OutputFormat {
    Text,
    Json,
    Csv,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    analysis: Analysis,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
    /// Predictions whose improvement over the best backbone is reported.
    #[arg(long, conflicts_with = "accuracy")]
    preds: Option<PathBuf>,
    /// Method accuracy whose improvement over the best backbone is reported.
    #[arg(long)]
    accuracy: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum EnsembleMethod {
    Logavg,
    Vote1,
    Vote3,
    Conf,
    Clogavg,
    Cconf,
}

#[derive(Args, Debug)]
struct EnsembleArgs {
    #[arg(long, value_enum)]
    method: EnsembleMethod,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Temperatures from `calibrate`, required by the calibrated methods.
    #[arg(long)]
    temps: Option<PathBuf>,
    /// Z-score each backbone's logits before combining.
    #[arg(long)]
    zscore: bool,
    #[arg(long, default_value = "preds.npy")]
    out: PathBuf,
    /// Write a result row for `report`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to `val`, or a seeded holdout of `train` when absent.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "temps.json")]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum TrainMethod {
    Gac,
    Sl,
    Nlc,
    Probe,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Positivity {
    Softplus,
    Linear,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    method: TrainMethod,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training split; `gac` and `sl` default to `val` when present.
    #[arg(long)]
    split: Option<String>,
    /// Train on n examples per class.
    #[arg(long)]
    shots: Option<usize>,
    /// Seed for the shot sample; defaults to --seed.
    #[arg(long)]
    shots_seed: Option<u64>,
    /// Backbone for `probe`.
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    coupled_decay: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    no_normalize: bool,
    #[arg(long, value_enum, default_value_t = Positivity::Softplus)]
    positivity: Positivity,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Per-epoch history of `nlc` training as JSON.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "preds.npy")]
    out: PathBuf,
    /// Also write the combined logits.
    #[arg(long)]
    logits: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum CascadeCombinerArg {
    Logavg,
    #[value(name = "c-logavg")]
    CLogavg,
    #[value(name = "nlc-per-prefix")]
    NlcPerPrefix,
}

#[derive(Args, Debug)]
struct CascadeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    /// Evaluate the thresholds 0, 0.05, …, 1 instead of one.
    #[arg(long)]
    sweep: bool,
    /// `gflops` or a comma-separated list of backbone names.
    #[arg(long, default_value = "gflops")]
    order: String,
    #[arg(long, value_enum, default_value_t = CascadeCombinerArg::Logavg)]
    combiner: CascadeCombinerArg,
    #[arg(long)]
    temps: Option<PathBuf>,
    /// Seed for training the per-prefix controllers.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shots: Option<usize>,
    /// Trace JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FewshotArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    shots: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Train examples; also the test size unless --n-test is given.
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    n_val: usize,
    #[arg(long, default_value_t = 3)]
    backbones: usize,
    /// One accuracy for all backbones or one per backbone.
    #[arg(long, value_delimiter = ',', default_value = "0.7")]
    acc: Vec<f64>,
    #[arg(long, default_value_t = 0.8)]
    rho: f64,
    #[arg(long, default_value_t = 1.0)]
    reliable_acc: f64,
    #[arg(long, default_value_t = 2.0)]
    margin: f64,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 2.0)]
    cue: f64,
    #[arg(long, value_delimiter = ',')]
    gflops: Vec<f64>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Csv)]
    format: ReportFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}
