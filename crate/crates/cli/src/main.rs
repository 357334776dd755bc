//! `roam`: synthetic data, training, evaluation, routing maps, solver
//! benchmarks and gradient checks for the region-routing aggregator.

mod bench;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::UsageError;

#[derive(Debug, Parser)]
#[command(
    name = "roam",
    version,
    about = "Optimal-transport region routing for slide-level MIL"
)]
pub struct Cli {
    /// TOML run config with [synth], [model], [train] and [paths] sections.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides both the synthetic-data seed and the training seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Validate and print the resolved config without doing any work.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset (bags, manifest, resolved spec).
    GenSynth(GenSynthArgs),
    /// Train on a manifest's train split with validation-based selection.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split; prints a metrics report as JSON.
    Eval(EvalArgs),
    /// Export the routing map of one bag as CSV plus diagnostics JSON.
    Route(RouteArgs),
    /// Time the Sinkhorn solvers over a grid of sizes; prints CSV.
    Bench(BenchArgs),
    /// Run the finite-difference gradient suite on the tiny instance.
    CheckGrad(CheckGradArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub slides_per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub bag: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Region counts.
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256, 512])]
    pub m: Vec<usize>,
    /// Expert counts.
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8])]
    pub e: Vec<usize>,
    /// Sinkhorn iteration counts.
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 20, 40])]
    pub t: Vec<usize>,
    /// Timed repetitions per cell; the median is reported.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
}

#[derive(Debug, Args)]
pub struct CheckGradArgs {
    /// Restrict to these variants (default, no_routing_gnn, no_graph_reg,
    /// no_ot_modulation, softmax_routing, detach_routing).
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
