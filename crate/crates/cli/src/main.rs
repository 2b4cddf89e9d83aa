use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;
mod manifest;

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "timepfn", version, about = "Synthetic priors and channel-mixing forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus of multivariate series.
    Generate(GenerateArgs),
    /// Pretrain a model on a corpus.
    Train(TrainArgs),
    /// Fine-tune a checkpoint on the training split of a CSV dataset.
    Finetune(FinetuneArgs),
    /// Score a checkpoint or a baseline on the test split of a CSV dataset.
    Evaluate(EvaluateArgs),
    /// Forecast from one context CSV.
    Forecast(ForecastArgs),
    /// Print the header of a corpus or checkpoint file.
    Inspect(InspectArgs),
    /// Export (time, truth, forecast) rows of one test window as CSV.
    Plotdata(PlotdataArgs),
    /// Rerun the command recorded in a manifest and compare its outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Config file with [lmc], [kernels], [model] and [train] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "TIMEPFN_WORKERS", default_value_t = 0)]
    workers: usize,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Number of correlated series.
    #[arg(long)]
    series: usize,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Independent series added, as a fraction of the correlated count.
    #[arg(long, default_value_t = 0.25)]
    independent_ratio: f64,
    /// Required: every corpus must be reproducible from its seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// The published architecture.
    Paper,
    /// Two layers of width 64, trainable on a laptop.
    Desk,
    /// A few thousand parameters, for smoke tests.
    Tiny,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Compiled model defaults that the config file and flags refine.
    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_lr: Option<f64>,
    /// Log every n-th step.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scale {
    /// Standardize with training-split statistics.
    Standard,
    None,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// CSV with a header, a timestamp column and numeric variates.
    #[arg(long)]
    data: PathBuf,
    /// `train,val,test` as fractions or row counts; default 0.7,0.1,0.2.
    #[arg(long)]
    split: Option<timepfn::train_eval::SplitSpec>,
    #[arg(long, value_enum, default_value_t = Scale::Standard)]
    scale: Scale,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// `all` or a number of windows.
    #[arg(long, default_value = "all")]
    budget: timepfn::train_eval::Budget,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct ForecasterArgs {
    /// Checkpoint to evaluate.
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    model: Option<PathBuf>,
    /// naive, mean, seasonal or seasonal:<period>.
    #[arg(long)]
    baseline: Option<timepfn::train_eval::Baseline>,
    /// Context length for baselines; checkpoints use their own.
    #[arg(long, default_value_t = 96)]
    context_len: usize,
    /// Forecast horizon; at most the checkpoint's.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    forecaster: ForecasterArgs,
    /// Label stored in the record.
    #[arg(long)]
    protocol: Option<String>,
    /// Label stored in the record.
    #[arg(long, default_value = "all")]
    budget: String,
    #[arg(long, default_value_t = 2023)]
    seed: u64,
    /// Also write the record line to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ForecastArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV whose last rows form the context.
    #[arg(long)]
    context: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    path: PathBuf,
}

#[derive(Debug, Args)]
struct PlotdataArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    forecaster: ForecasterArgs,
    /// Offset of the window inside the test split.
    #[arg(long, default_value_t = 0)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    manifest: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    match commands::run(cli.command, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.kind.exit_code() as u8)
}
