//! `covct`: batch command-line front end for the covct pipeline.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use crate::config::FileConfig;

const PRECEDENCE: &str = "Option values come from command-line flags first, then from the \
--config TOML file (kebab-case keys, e.g. `t-noncovid = 0.6`), then from built-in defaults.\n\
Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant violation.";

#[derive(Parser, Debug)]
#[command(name = "covct", version, about = "CT-volume COVID-19 classification pipeline tools", after_help = PRECEDENCE)]
struct Cli {
    /// TOML file with default option values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for per-patient work (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load every patient directory and summarize it.
    Ingest(IngestArgs),
    /// Print the sub-volume sampling plan of every patient.
    Plan(PlanArgs),
    /// Pool sub-volume votes of all models into one diagnosis per patient.
    Vote(VoteArgs),
    /// Assemble 96x3 slice-probability features per patient.
    Features(FeaturesArgs),
    /// Train a logistic-regression or MLP head on assembled features.
    TrainHead(TrainHeadArgs),
    /// Diagnose patients with a trained head.
    PredictHead(PredictHeadArgs),
    /// Assign patients to stratified cross-validation folds.
    Folds(FoldsArgs),
    /// Score diagnoses against ground truth and write a metrics report.
    Eval(EvalArgs),
    /// Generate a synthetic cohort with labels and prediction files.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Default)]
struct Output {
    /// Output file (default: stdout).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct ThresholdFlags {
    /// NON_COVID votes below this confidence are discarded [default: 0.5].
    #[arg(long, value_name = "P")]
    t_noncovid: Option<f64>,
    /// Votes of either class below this confidence are discarded [default: 0.5].
    #[arg(long, value_name = "P")]
    t_all: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    Logreg,
    Mlp,
}

#[derive(Args, Debug, Default)]
struct HeadFlags {
    /// Head architecture [default: logreg].
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    /// Training epochs [default: 200].
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Linear warmup epochs [default: 5].
    #[arg(long)]
    warmup: Option<usize>,
    /// Mini-batch size [default: 32].
    #[arg(long)]
    batch_size: Option<usize>,
    /// MLP hidden width [default: 100].
    #[arg(long)]
    hidden: Option<usize>,
    /// Label smoothing weight [default: 0.1].
    #[arg(long)]
    label_smoothing: Option<f64>,
    /// SAM radius; 0 trains with plain SGD [default: 0.05].
    #[arg(long)]
    sam_rho: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct FoldFlags {
    /// Number of stratified folds [default: 5].
    #[arg(long, value_name = "K")]
    folds: Option<usize>,
    /// Restrict to (eval) or exclude from training (train-head) this fold.
    #[arg(long, value_name = "I")]
    holdout_fold: Option<usize>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Directory with one sub-directory of slice images per patient.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Optional `patient_id,LABEL` file.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum PlanMode {
    /// One 128-slice training sample per patient.
    Train,
    /// Every 256-slice inference sub-volume (each run under 8 flips).
    #[default]
    Infer,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PlanMode::Infer)]
    mode: PlanMode,
    /// Seed for the training start offset [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct VoteArgs {
    /// Prediction file with SUBVOLUME records.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[command(flatten)]
    thresholds: ThresholdFlags,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    /// Prediction file with SLICE records.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Use only this model's slices (default: average over all models).
    #[arg(long)]
    model_id: Option<String>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct TrainHeadArgs {
    /// Feature file written by `features`.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    head: HeadFlags,
    #[command(flatten)]
    folds: FoldFlags,
    /// Seed for initialization, shuffling and folds [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct PredictHeadArgs {
    /// Head file written by `train-head`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct FoldsArgs {
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_name = "K")]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Ground-truth `patient_id,LABEL` file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Score the pooled vote over this prediction file.
    #[arg(long, conflicts_with_all = ["diagnosis", "model"])]
    predictions: Option<PathBuf>,
    /// Score an existing diagnosis file.
    #[arg(long, conflicts_with = "model")]
    diagnosis: Option<PathBuf>,
    /// Score a trained head on `--features`.
    #[arg(long, requires = "features")]
    model: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[command(flatten)]
    thresholds: ThresholdFlags,
    #[command(flatten)]
    folds: FoldFlags,
    /// Seed of the fold assignment used with --holdout-fold [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for labels.csv and predictions.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    covid: usize,
    #[arg(long, default_value_t = 100)]
    noncovid: usize,
    /// Number of simulated models.
    #[arg(long, default_value_t = 1)]
    models: usize,
    #[arg(long, default_value_t = 64)]
    min_slices: usize,
    #[arg(long, default_value_t = 600)]
    max_slices: usize,
    /// Standard deviation of the logit noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.8)]
    lesion_covid: f64,
    #[arg(long, default_value_t = 0.05)]
    lesion_noncovid: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write slice-image directories here, one per patient.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Side length of the written slice images.
    #[arg(long, default_value_t = 16)]
    image_size: usize,
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_env("COVCT_LOG").unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .without_time()
        .init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Some(jobs) = cli.jobs.or(file.jobs) {
        if jobs == 0 {
            return Err(failure::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match cli.command {
        Command::Ingest(a) => commands::ingest(a, &file),
        Command::Plan(a) => commands::plan(a, &file),
        Command::Vote(a) => commands::vote(a, &file),
        Command::Features(a) => commands::features(a, &file),
        Command::TrainHead(a) => commands::train_head(a, &file),
        Command::PredictHead(a) => commands::predict_head(a, &file),
        Command::Folds(a) => commands::folds(a, &file),
        Command::Eval(a) => commands::eval(a, &file),
        Command::Synth(a) => commands::synth(a, &file),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { failure::USAGE } else { failure::OK });
        }
    };
    init_logging(cli.verbose);
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::from(failure::OK),
        Ok(Err(err)) => {
            eprintln!("error: {err:#}");
            failure::exit_code(&err)
        }
        Err(_) => ExitCode::from(failure::INTERNAL),
    }
}
