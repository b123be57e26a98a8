use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, configuration or input files.
    #[error("{0}")]
    Usage(String),
    /// Training or inference produced non-finite values.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "stmotion", version, about = "Spatio-temporal transformer for skeletal motion prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic periodic motion file.
    Synth(SynthArgs),
    /// Train a model and write history and checkpoints.
    Train(TrainArgs),
    /// Report short-horizon metrics for a checkpoint and the zero-velocity baseline.
    Eval(EvalArgs),
    /// Predict autoregressively from a seed motion.
    Rollout(RolloutArgs),
    /// Compare attention cost of the decoupled and full joint-time variants.
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// `default` for the built-in 9-joint skeleton, or a JSON skeleton file.
    #[arg(long, default_value = "default")]
    pub skeleton: String,
    #[arg(long, default_value_t = 7200)]
    pub frames: usize,
    #[arg(long, default_value_t = 60.0)]
    pub fps: f32,
    /// JSON list of per-joint motions; without it a random periodic clip is drawn.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Angle noise in radians, used with --spec.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write forward-kinematics positions as CSV.
    #[arg(long)]
    pub fk_csv: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training motion files (STM1). Repeat for several files.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    /// Validation motion files; by default the tail of each training file is held out.
    #[arg(long)]
    pub val_data: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// st, vanilla_1d or full_2d.
    #[arg(long)]
    pub variant: Option<String>,
    /// softmax or sum.
    #[arg(long)]
    pub tau: Option<String>,
    /// query_separate, all_separate or all_shared.
    #[arg(long)]
    pub sharing: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Workspace limit in f32 elements.
    #[arg(long)]
    pub memory_budget: Option<usize>,
    /// Any config key, as key=value. Repeatable.
    #[arg(long = "set")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated horizons in milliseconds.
    #[arg(long, value_delimiter = ',', default_values_t = [100, 200, 300, 400])]
    pub horizons: Vec<u32>,
    /// Number of evaluation windows spread evenly over the data.
    #[arg(long, default_value_t = 256)]
    pub windows: usize,
    /// Score the targets against themselves instead of the model.
    #[arg(long)]
    pub self_check: bool,
    /// Length of an additional long-term rollout, in seconds.
    #[arg(long, requires = "longterm_out")]
    pub longterm_seconds: Option<usize>,
    /// CSV for the long-term spectrum curves.
    #[arg(long, requires = "longterm_seconds")]
    pub longterm_out: Option<PathBuf>,
    /// Seed for sampling the long-term reference windows.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Motion file whose frames seed the prediction; at most one model window long.
    #[arg(long)]
    pub seed_file: PathBuf,
    #[arg(long)]
    pub seconds: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write every step's attention weights to this CSV.
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Variants to measure. Repeatable; defaults to st and full_2d.
    #[arg(long)]
    pub variant: Vec<String>,
    /// `layers,window,batch` triples. Repeatable; defaults to the built-in grid.
    #[arg(long)]
    pub grid: Vec<String>,
    #[arg(long, default_value_t = 9)]
    pub joints: usize,
    /// Base model settings (key = value file).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub memory_budget: Option<usize>,
    /// Skip the timed training step.
    #[arg(long)]
    pub no_time: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Rollout(a) => commands::rollout(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
