//! `holounfold` command-line tool.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Method;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "holounfold", version, about = "Phase-only hologram synthesis by deep unfolding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Each flag overrides the matching key
/// of the config file.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// INI file with [optics], [solver], [train], [paths] sections
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Wavelength in meters
    #[arg(long)]
    wavelength: Option<String>,
    /// Pixel pitch in meters
    #[arg(long)]
    pitch: Option<String>,
    /// Propagation distance in meters
    #[arg(long)]
    distance: Option<String>,
    #[arg(long)]
    width: Option<String>,
    #[arg(long)]
    height: Option<String>,
    /// Unfolding stages
    #[arg(long)]
    stages: Option<String>,
    /// Iterations for gs and gd
    #[arg(long)]
    iters: Option<String>,
    /// Gradient step size
    #[arg(long)]
    rho: Option<String>,
    /// none, tv or pcd
    #[arg(long)]
    denoiser: Option<String>,
    #[arg(long)]
    tv_weight: Option<String>,
    #[arg(long)]
    tv_iters: Option<String>,
    /// Learning rate
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    validation_fraction: Option<String>,
    /// Denoiser embedding channels
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    blocks: Option<String>,
    /// CGHW weight file
    #[arg(long, value_name = "FILE")]
    weights: Option<String>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    /// Metrics CSV (default <out>/metrics.csv)
    #[arg(long, value_name = "FILE")]
    metrics: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Any config key, e.g. --set optics.distance=0.3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        let flags = [
            ("optics.wavelength", &self.wavelength),
            ("optics.pitch", &self.pitch),
            ("optics.distance", &self.distance),
            ("optics.width", &self.width),
            ("optics.height", &self.height),
            ("solver.stages", &self.stages),
            ("solver.iters", &self.iters),
            ("solver.rho", &self.rho),
            ("solver.denoiser", &self.denoiser),
            ("solver.tv_weight", &self.tv_weight),
            ("solver.tv_iters", &self.tv_iters),
            ("train.lr", &self.lr),
            ("train.epochs", &self.epochs),
            ("train.batch_size", &self.batch_size),
            ("train.validation_fraction", &self.validation_fraction),
            ("train.channels", &self.channels),
            ("train.blocks", &self.blocks),
            ("paths.weights", &self.weights),
            ("paths.out", &self.out),
            ("paths.metrics", &self.metrics),
            ("run.seed", &self.seed),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Propagate an amplitude image (or an 8-bit phase map) to the image plane
    Propagate {
        input: PathBuf,
        /// Treat the input as 8-bit phase codes of a phase-only field
        #[arg(long)]
        phase: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Gerchberg-Saxton baseline
    Gs {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Plain gradient descent on the amplitude fidelity
    Gd {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train per-stage denoiser weights on a folder of images
    UnfoldTrain {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the unfolded solver with trained weights
    UnfoldInfer {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize metrics CSV files per method
    Eval {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write a seeded synthetic grayscale dataset
    SynthData {
        dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Propagate { input, phase, common } => commands::propagate(&common.resolve()?, &input, phase),
        Command::Gs { input, common } => commands::solve(&common.resolve()?, &input, Method::Gs).map(drop),
        Command::Gd { input, common } => commands::solve(&common.resolve()?, &input, Method::Gd).map(drop),
        Command::UnfoldInfer { input, common } => {
            commands::solve(&common.resolve()?, &input, Method::Unfold).map(drop)
        }
        Command::UnfoldTrain { dataset, common } => commands::unfold_train(&common.resolve()?, &dataset),
        Command::Eval { csv, common } => commands::eval(&common.resolve()?, &csv),
        Command::SynthData { dir, count, size, seed } => commands::synth_data(&dir, count, size, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
