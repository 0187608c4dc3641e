//! `blindtof` command-line tool: simulate tensors, solve them in blind or
//! known-kernel mode, evaluate against ground truth and render
//! light-in-flight frames.
//!
//! Exit status: 0 on success, 1 when the solver fails or fewer than 99% of
//! pixels converge, 2 for usage and configuration errors, 3 for file
//! errors.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::SigmaArg;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "blindtof",
    version,
    about = "Super-resolved time-of-flight recovery with a known or unknown kernel"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a measurement tensor and its ground truth from a scene file
    Simulate(SimulateArgs),
    /// Recover spikes (and the kernel in blind mode) for every pixel
    Solve(SolveArgs),
    /// Compare recovered reports against ground truth
    Eval(EvalArgs),
    /// Render light-in-flight frames from recovered reports
    Lif(LifArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for blindtof::pipeline::Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => blindtof::pipeline::Dtype::F32,
            DtypeArg::F64 => blindtof::pipeline::Dtype::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Blind,
    Known,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scene description (JSON)
    #[arg(long)]
    pub scene: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Sample type of the written tensor
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DtypeArg,
    /// Noise seed, overriding the scene file
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the summary as JSON
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Tensor header (JSON) of the measurements
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Recovery mode
    #[arg(long, value_enum, default_value = "blind")]
    pub mode: ModeArg,
    /// Kernel tensor header (1×1) shared by every pixel in known mode
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    /// Number of returns per pixel
    #[arg(long)]
    pub k: Option<usize>,
    /// Noise level: `auto` to estimate per pixel, or an ℓ2 tolerance
    #[arg(long, value_parser = config::parse_sigma)]
    pub sigma: Option<SigmaArg>,
    /// Inner iterations per rational fit
    #[arg(long)]
    pub jmax: Option<usize>,
    /// Maximum number of restarts
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Base random seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: BLINDTOF_PARALLELISM, then the CPU count)
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Kernel support in samples for blind mode
    #[arg(long)]
    pub kernel_support: Option<usize>,
    /// Relative spectral magnitude below which kernel bins are dropped in known mode
    #[arg(long)]
    pub band_threshold: Option<f64>,
    /// JSON configuration file; flags take precedence over it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the summary as JSON
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth reports (JSON Lines)
    #[arg(long)]
    pub truth: PathBuf,
    /// Recovered reports (JSON Lines)
    #[arg(long)]
    pub reports: PathBuf,
    /// True kernel tensor header (1×1 or one per pixel)
    #[arg(long)]
    pub true_kernel: Option<PathBuf>,
    /// Recovered kernel tensor header
    #[arg(long)]
    pub kernels: Option<PathBuf>,
    /// Print JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("when").required(true).args(["times", "stride"]))]
pub struct LifArgs {
    /// Recovered reports (JSON Lines)
    #[arg(long)]
    pub reports: PathBuf,
    /// Recovered kernel tensor header
    #[arg(long)]
    pub kernels: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Frame times in seconds, comma separated
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub times: Option<Vec<f64>>,
    /// Frame spacing in seconds, sweeping the whole window from zero
    #[arg(long)]
    pub stride: Option<f64>,
    /// Print the summary as JSON
    #[arg(long)]
    pub json: bool,
}

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Simulate(a) => commands::simulate::run(&a),
        Command::Solve(a) => commands::solve::run(&a),
        Command::Eval(a) => commands::eval::run(&a),
        Command::Lif(a) => commands::lif::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
