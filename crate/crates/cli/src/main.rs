//! `cliff`: generate synthetic data, train encoders with the cliff criterion,
//! evaluate them, sweep loss landscapes and check gradients.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cliff",
    version,
    about = "Disentanglement by aligning density cliffs with the axes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (CSV plus JSON sidecar).
    Gen(GenArgs),
    /// Train an encoder on a dataset.
    Train(TrainArgs),
    /// Score trained parameters against the dataset's true factors.
    Eval(EvalArgs),
    /// Sweep every loss term over 2-D projection angles.
    Landscape(LandscapeArgs),
    /// Compare analytic and finite-difference gradients of every loss term.
    Gradcheck(GradcheckArgs),
    /// Run the multi-seed generate/train/evaluate protocol.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
pub struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `dataset_seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `init_seed` and `zeta_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the directory holding the parameters.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
pub struct LandscapeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Angle step in degrees; defaults to the config's.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the 1-D univariate sweep here.
    #[arg(long)]
    univariate_out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Repeatable; defaults to 0.
    #[arg(long)]
    seed: Vec<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Test hook: negate the backward rule of one operation kind.
    #[arg(long, hide = true)]
    negate_backward: Option<String>,
}

#[derive(Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of runs.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Base seed for all three sources; defaults to the config's seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
    Check(String),
}

impl From<cliff_core::Error> for Failure {
    fn from(e: cliff_core::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Landscape(a) => commands::landscape(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Experiment(a) => commands::experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical abort: {msg}");
            ExitCode::from(3)
        }
    }
}
