//! `openset` — run one pipeline stage per invocation.
//!
//! ```text
//! openset <prepare|train|evaluate|sweep-k|sweep-threshold|pca|report> --config exp.json \
//!     [--seed N] [--out DIR] [--method distance|probability] [--threshold X] [--k N]
//! ```
//!
//! `OPENSET_EMBED_THREADS` caps the worker pool used for embedding and search.

mod artifacts;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use openset_core::OpenSetMethod;

use crate::commands::{Command, Context};
use crate::config::{ExperimentConfig, Overrides, Precision};
use crate::error::{CliError, Result};

const THREADS_ENV: &str = "OPENSET_EMBED_THREADS";

#[derive(Parser)]
#[command(name = "openset", version, about = "Triplet-embedding KNN classification with open-set detection")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load, preprocess and split the dataset; writes manifest.json.
    Prepare(Common),
    /// Train the embedding network and build the gallery.
    Train(Common),
    /// Closed-set and open-set evaluation reports.
    Evaluate(Common),
    /// Top-1/top-3 accuracy for k = 1..max_k.
    SweepK(Common),
    /// Per-class sensitivity over the threshold grid; picks an operating point.
    SweepThreshold(Common),
    /// 2-D PCA projection of the test A embeddings.
    Pca(Common),
    /// Long-form CSV and summary from the threshold sweeps.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Radius or probability threshold for the active method.
    #[arg(long)]
    threshold: Option<f64>,
    /// Neighbour count for KNN and the probability rule.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Distance,
    Probability,
}

impl Cmd {
    fn split(self) -> (Command, Common) {
        match self {
            Cmd::Prepare(c) => (Command::Prepare, c),
            Cmd::Train(c) => (Command::Train, c),
            Cmd::Evaluate(c) => (Command::Evaluate, c),
            Cmd::SweepK(c) => (Command::SweepK, c),
            Cmd::SweepThreshold(c) => (Command::SweepThreshold, c),
            Cmd::Pca(c) => (Command::Pca, c),
            Cmd::Report(c) => (Command::Report, c),
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Config {
        path: PathBuf::from(format!("${THREADS_ENV}")),
        reason: format!("expected a positive integer, got `{raw}`"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config { path: PathBuf::from(format!("${THREADS_ENV}")), reason: e.to_string() })
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let (command, common) = cli.command.split();
    let overrides = Overrides {
        seed: common.seed,
        out: common.out,
        method: common.method.map(|m| match m {
            MethodArg::Distance => OpenSetMethod::Distance,
            MethodArg::Probability => OpenSetMethod::Probability,
        }),
        threshold: common.threshold,
        k: common.k,
    };
    let cfg = ExperimentConfig::load(&common.config, &overrides)?;
    let out = artifacts::OutputDir::create(&cfg.output_dir, cfg.hash())?;
    log::info!("{} → {} (config {})", command.name(), cfg.output_dir.display(), &out.config_hash()[..12]);
    let ctx = Context { cfg: &cfg, out, threshold_flag: common.threshold };
    match cfg.precision {
        Precision::F32 => commands::run::<f32>(command, ctx),
        Precision::F64 => commands::run::<f64>(command, ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
