//! `timesync`: generate, preprocess, train, evaluate and ablate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::Layout;
use config::{parse_ks, ConfigError, ExperimentConfig, Ks};

/// Environment variable overriding the worker thread count.
const THREADS_ENV: &str = "TIMESYNC_THREADS";

#[derive(Parser)]
#[command(name = "timesync", version, about = "Temporal intent modelling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic journeys to <out>/data.
    Generate(Common),
    /// Split, bin and tokenize <out>/data into <out>/preprocessed.
    Preprocess(Common),
    /// Train every ladder variant at every seed into <out>/train.
    Train(Common),
    /// Score the trained ladder on the test split and print the report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Recall cutoffs, e.g. 1,5,10; defaults to `eval.ks`.
        #[arg(long, value_parser = parse_ks)]
        k: Option<Ks>,
    },
    /// Train the single-feature-off variants and print the ablation report.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_ks)]
        k: Option<Ks>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, Layout)> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let root = common.out.clone().unwrap_or_else(|| config.output_dir.clone());
    Ok((config, Layout { root }))
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate(c) => {
            let (config, layout) = load(&c)?;
            commands::generate(&config, &layout)
        }
        Command::Preprocess(c) => {
            let (config, layout) = load(&c)?;
            commands::preprocess_stage(&config, &layout)
        }
        Command::Train(c) => {
            let (config, layout) = load(&c)?;
            commands::train(&config, &layout)
        }
        Command::Evaluate { common, k } => {
            let (config, layout) = load(&common)?;
            let ks = k.map_or_else(|| config.eval.ks.clone(), |k| k.0);
            commands::evaluate_stage(&config, &layout, &ks)
        }
        Command::Ablate { common, k } => {
            let (config, layout) = load(&common)?;
            let ks = k.map_or_else(|| config.eval.ks.clone(), |k| k.0);
            commands::ablate(&config, &layout, &ks)
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigError>() || matches!(c.downcast_ref::<timesync_core::Error>(), Some(timesync_core::Error::Config(_)))
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
