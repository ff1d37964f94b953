//! `range-al`: projection, active-learning experiments and their analyses.

mod check;
mod common;
mod le;
mod project;
mod run;
mod synth;
mod ttda;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "range-al", version, about = "Active learning for LiDAR range-image segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Project point-cloud scans to range images (MCPT containers).
    Project(project::Args),
    /// Run a matrix of active-learning experiments described by a run manifest.
    Run(run::Args),
    /// Labeling efficiency of each curve of a curves CSV against a baseline.
    Le(le::Args),
    /// Aggregated BALD scores of L, U and their test-time augmented copies.
    Ttda(ttda::Args),
    /// Validate MCPT files.
    TensorCheck {
        /// Files to check.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Write a synthetic labeled dataset and its manifest.
    Synth(synth::Args),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Project(a) => project::exec(a),
        Command::Run(a) => run::exec(a),
        Command::Le(a) => le::exec(a),
        Command::Ttda(a) => ttda::exec(a),
        Command::TensorCheck { files } => check::exec(&files),
        Command::Synth(a) => synth::exec(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
