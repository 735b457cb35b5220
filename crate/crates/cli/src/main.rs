//! `convdl`: data generation, sparse coding, dictionary learning,
//! verification and benchmarks from the command line.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 divergence abort, 4 non-convergence.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "convdl", version, about = "Distributed convolutional dictionary learning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML file with the subcommand's parameters. Flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker count; defaults to the number of cores.
    #[arg(long, global = true, env = "CONVDL_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_parser = ["async", "deterministic"])]
    pub scheduler: Option<String>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Also write the worker grid layout to `grid.json`.
    #[arg(long, global = true)]
    pub dump_grid: bool,
    /// Allow the full-size presets.
    #[arg(long, global = true)]
    pub full: bool,
}

#[derive(Args, Debug, Clone)]
pub struct Input {
    /// `.sig` or `.png` signal.
    #[arg(long, conflicts_with = "preset")]
    pub input: Option<PathBuf>,
    /// Synthetic preset: 1d-tiny, 2d-tiny, or 1d-small with --full.
    #[arg(long)]
    pub preset: Option<String>,
    /// Convert color PNG input to gray.
    #[arg(long)]
    pub gray: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic signal with its ground truth.
    MakeData {
        #[arg(long, default_value = "1d-tiny")]
        preset: String,
        /// Write a smooth test image of the preset's size instead.
        #[arg(long)]
        image: bool,
    },
    /// Sparse-code a signal with a fixed dictionary.
    Encode {
        #[command(flatten)]
        input: Input,
        /// Dictionary `.sig`; the ground truth for presets.
        #[arg(long)]
        dictionary: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        lambda_frac: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        max_iter: Option<u64>,
        #[arg(long, value_parser = ["grid", "line"])]
        partition: Option<String>,
        /// Ablation: commit border updates without arbitration.
        #[arg(long)]
        no_soft_locks: bool,
    },
    /// Learn a dictionary.
    Learn {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        atoms: Option<usize>,
        /// Atom support, e.g. `8,8`.
        #[arg(long, value_delimiter = ',')]
        support: Option<Vec<usize>>,
        #[arg(long)]
        max_outer: Option<usize>,
        #[arg(long)]
        lambda_frac: Option<f64>,
        #[arg(long, value_parser = ["gaussian", "patches"])]
        init: Option<String>,
        #[arg(long, value_parser = ["grid", "line"])]
        partition: Option<String>,
        /// Checkpoint directory, written after every outer iteration.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Resume from the checkpoint directory.
        #[arg(long, requires = "checkpoint")]
        resume: bool,
    },
    /// Run the numerical oracles.
    Verify {
        #[arg(long, conflicts_with = "oracle")]
        all: bool,
        #[arg(long, value_enum)]
        oracle: Option<Oracle>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Timing benchmarks, written as CSV and JSON.
    Bench {
        #[arg(value_enum)]
        kind: BenchKind,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Worker counts for scaling runs, e.g. `1,4,9`.
        #[arg(long, value_delimiter = ',')]
        workers_list: Option<Vec<usize>>,
        #[arg(long, value_parser = ["grid", "line"])]
        split: Option<String>,
        /// Multiplier of the default tolerance.
        #[arg(long)]
        eps_factor: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Oracle {
    CostDelta,
    Interference,
    Acceptance,
    Lasso,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BenchKind {
    Strategies,
    Scaling,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = &cli.common;
    let res = match cli.command {
        Command::MakeData { preset, image } => commands::make_data(c, &preset, image),
        Command::Encode { input, dictionary, lambda, lambda_frac, eps, max_iter, partition, no_soft_locks } => {
            let flags = commands::EncodeParams { lambda, lambda_frac, eps, max_iter, partition };
            commands::encode(c, &input, dictionary.as_deref(), flags, !no_soft_locks)
        }
        Command::Learn { input, atoms, support, max_outer, lambda_frac, init, partition, checkpoint, resume } => {
            let flags = commands::LearnFlags { atoms, support, max_outer, lambda_frac, init, partition, checkpoint, resume };
            commands::learn(c, &input, flags)
        }
        Command::Verify { all, oracle, trials } => commands::verify(c, all, oracle, trials),
        Command::Bench { kind, preset, repeats, workers_list, split, eps_factor } => {
            let flags = commands::BenchParams { preset, repeats, workers_list, split, eps_factor };
            commands::bench(c, kind, flags)
        }
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            let (kind, code) = e.classify();
            eprintln!("{}", serde_json::json!({"error": kind, "message": e.to_string()}));
            ExitCode::from(code)
        }
    }
}
