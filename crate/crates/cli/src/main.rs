//! `downscale-lab`: data generation, training, evaluation, the six-cell
//! matrix, rendering and self-checks.
//!
//! Exit codes: 0 ok, 1 I/O or format error, 2 configuration error,
//! 3 training divergence, 4 matrix cell failure, 5 self-check failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "downscale-lab", version, about = "Loss and gamma-preprocessing experiments for grid-to-grid downscaling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Sectioned key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set experiment.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Seed: the data seed for gen-data, the training seed otherwise.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print per-epoch progress.
    #[arg(short, long)]
    pub verbose: bool,
}

#[derive(Args, Debug, Clone)]
pub struct DataSource {
    /// Dataset container; defaults to `<out>/dataset.dsl`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generate the dataset from the config instead of loading it.
    #[arg(long)]
    pub gen: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and print its summary statistics.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one experiment cell.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: DataSource,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write metrics and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run all six cells over the configured seeds.
    Matrix {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: DataSource,
        /// Parallel workers (capped by DOWNSCALE_LAB_THREADS).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Render truth, input, prediction and difference heatmaps for one sample.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run the invariant self-checks.
    Check,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Train { common, source } => commands::train(&common, &source),
        Command::Eval { checkpoint, data, split, out } => commands::eval(&checkpoint, &data, &split, out.as_deref()),
        Command::Matrix { common, source, jobs } => commands::matrix(&common, &source, jobs),
        Command::Render { checkpoint, data, split, index, out } => commands::render(&checkpoint, &data, &split, index, &out),
        Command::Check => commands::check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
