//! `fmpestf`: synthesize traffic data, train and evaluate forecasting models,
//! produce forecasts and run gradient checks.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
//! 4 numerical failure.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fmpestf::Ablation;

#[derive(Debug, Parser)]
#[command(name = "fmpestf", version, about = "Spatial-temporal traffic forecasting")]
pub struct Cli {
    #[command(flatten)]
    pub shared: Shared,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Shared {
    /// JSON run manifest or config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory for artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads; 1 is fully deterministic.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[arg(long, global = true, value_parser = parse_ablation)]
    pub ablate: Option<Ablation>,

    /// Write every relation matrix for one window as delimited text.
    #[arg(long, global = true)]
    pub dump_graphs: bool,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: fmpestf::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and save its best checkpoint.
    Train(DataArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(CheckpointArgs),
    /// Forecast the steps after a history window.
    Predict(PredictArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    /// Sampling interval in minutes.
    #[arg(long)]
    pub interval: Option<u32>,
    #[arg(long)]
    pub coupling: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub series: Option<PathBuf>,
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    /// Overrides train.max_epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub series: Option<PathBuf>,
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    /// History ends just before this step; defaults to the end of the series.
    #[arg(long)]
    pub end: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// A network stage (embedding, attconv, fusion, encoder, glu, model) or a tape operation.
    #[arg(long, default_value = "model")]
    pub op: String,
    /// Defaults to 1e-4 for network stages and 1e-6 for single operations.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Print the checkable names and exit.
    #[arg(long)]
    pub list: bool,
    #[arg(long, hide = true)]
    pub inject_sign_flip: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

