mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Learn population energies from snapshot data.
#[derive(Debug, Parser)]
#[command(name = "jkoflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic snapshot dataset.
    Generate(GenerateArgs),
    /// Fit an energy to a snapshot dataset.
    Train(TrainArgs),
    /// Write per-step prediction metrics for a checkpoint.
    Evaluate(EvaluateArgs),
    /// Roll a checkpoint forward and save the predicted snapshots.
    Predict(PredictArgs),
    /// Evaluate a 2-D energy on a regular grid.
    ExportGrid(ExportGridArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// quadratic, styblinski, semicircle, spiral or line
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    n_points: Option<usize>,
    /// Standard deviation of trajectory clouds.
    #[arg(long)]
    sd: Option<f64>,
    /// train, val or test
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    corrupt_fraction: Option<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    /// printed or classical
    #[arg(long)]
    styblinski_form: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// jkonet or forward
    #[arg(long, default_value = "jkonet")]
    model: String,
    /// Dataset directory; repeat for several trajectories.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    teacher_forcing: bool,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    strong_convexity: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// one-step, all-steps or both
    #[arg(long)]
    mode: Option<String>,
    /// Require labels and report class-histogram distances.
    #[arg(long)]
    classes: bool,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// one-step or all-steps
    #[arg(long, default_value = "all-steps")]
    mode: String,
    /// Transitions to predict; defaults to the dataset's.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportGridArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    /// x_min,x_max,y_min,y_max
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    bounds: Option<Vec<f64>>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Predict(a) => commands::predict(a),
        Command::ExportGrid(a) => commands::export_grid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
