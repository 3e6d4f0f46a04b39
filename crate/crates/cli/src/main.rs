use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod data;
mod explain;
mod manifest;
mod metrics;
mod train;

#[derive(Parser)]
#[command(name = "sharpcam", version, about = "Train, explain and chart GradCAM-regularized classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier and write checkpoint, metrics and manifest.
    Train(TrainArgs),
    /// Dump the GradCAM map and measures for one sample.
    Explain(ExplainArgs),
    /// Split a metrics CSV into one long-format file per measure.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Weight of the CAM entropy term.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub beta: f64,
    #[arg(long, default_value_t = 1e-3, allow_negative_numbers = true)]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of classes; taken from the directory layout with --data-dir.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    /// Directory of `<class>/<image>` files instead of synthetic data.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Synthetic samples per class.
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    /// Synthetic background noise level in [0, 1].
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    pub noise: f64,
    /// Seed of the synthetic dataset.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Conv block whose activations feed GradCAM (default: the last).
    #[arg(long)]
    pub target_layer: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Index into the split the checkpoint was trained with.
    #[arg(long, conflicts_with = "input_image", required_unless_present = "input_image")]
    pub sample_index: Option<usize>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub input_image: Option<PathBuf>,
    /// Class to explain (default: the predicted class).
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct MetricsArgs {
    #[arg(long)]
    pub metrics_csv: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failed command: one-line message and process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }
}

impl From<sharpcam::Error> for CliError {
    fn from(e: sharpcam::Error) -> Self {
        let code = match e {
            sharpcam::Error::NonFiniteLoss { .. } => 2,
            _ => 1,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::config(e.to_string())
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", single_line(first.trim_start_matches("error:")));
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Train(a) => train::run(&a),
        Command::Explain(a) => explain::run(&a),
        Command::Metrics(a) => metrics::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", single_line(&e.message));
            ExitCode::from(e.code)
        }
    }
}
