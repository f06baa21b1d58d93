//! `hoi`: data generation, training, inference, evaluation, benchmarking
//! and planner simulation from the command line.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime
//! failures (I/O, divergence, numeric faults).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "hoi", version, about = "Human-object interaction anticipation toolkit")]
pub struct Cli {
    /// Seed for data generation, initialisation, sampling and simulation.
    #[arg(long, global = true, default_value_t = 1551)]
    pub seed: u64,
    /// JSON file with optional `model`, `optimizer`, `loss`, `data`,
    /// `scenario`, `eval` and `bench` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded synthetic dataset with geometry-derived labels.
    GenData(GenDataArgs),
    /// Train the detection stage or the anticipation (Hydra) heads.
    Train(TrainArgs),
    /// Predict interaction probabilities for every candidate pair.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Measure forward latency against the number of pairs.
    Bench(BenchArgs),
    /// Sweep the bartender planner over thresholds and horizons.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Detection,
    Hydra,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    /// Training clips.
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the trained weights.
    #[arg(long)]
    pub out: PathBuf,
    /// Starting weights; the detection checkpoint for the hydra stage.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Horizons of the hydra model.
    #[arg(long, value_delimiter = ',', default_value = "0,1,3,5")]
    pub horizons: Vec<u32>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Stop once the training mAP reaches this value.
    #[arg(long)]
    pub target_map: Option<f64>,
    /// Write the loss curve as CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Horizons to emit; all of the model's by default.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Vec<u32>,
    /// Drop pairs whose best probability is below this.
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Oracle,
    Detection,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Ground-truth clips.
    #[arg(long)]
    pub data: PathBuf,
    /// Detected tracks, required in detection mode.
    #[arg(long)]
    pub detected: Option<PathBuf>,
    #[arg(long)]
    pub iou: Option<f64>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, default_value_t = 0)]
    pub tau: u32,
    /// Weights whose class names to use; the generated vocabulary otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Model to time; a freshly initialised one when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Horizons of the fresh model.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub horizons: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    pub pairs: Vec<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PredictorKind {
    Scripted,
    Model,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,1,3,5")]
    pub taus: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
    pub thresholds: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    pub episodes: usize,
    #[arg(long, value_enum, default_value = "scripted")]
    pub predictor: PredictorKind,
    /// Weights for the model predictor.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Fluency table as CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the cells as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
