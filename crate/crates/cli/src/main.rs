//! `dtx`: scenario generation, training, evaluation and benchmarking.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 training
//! aborted on a non-finite value.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dtx_core::Preset;
use dtx_simworld::Family;

use crate::commands::EvalMode;
use crate::config::{CliConfig, ConfigError};

#[derive(Parser)]
#[command(name = "dtx", version, about = "Unified driving transformer on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Sectioned key = value file; see `dtx config`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=3e-4`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<CliConfig> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| ConfigError(format!("reading {}: {e}", p.display())))?),
            None => None,
        };
        Ok(config::load(text.as_deref(), &self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write scenario files, one JSON per scenario.
    Generate {
        /// Comma-separated families, assigned round-robin.
        #[arg(long, value_delimiter = ',', default_value = "straight,cut_in,emergency_brake,merge,turn")]
        families: Vec<Family>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.dtxf and loss_curve.csv into --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; its model and training settings win.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Open-loop, closed-loop or robustness evaluation; writes CSV into --out.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Required unless `eval.policy` is expert or zero.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward latency and memory per preset.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "small,base")]
        preset: Vec<Preset>,
        /// CSV destination; rows are printed either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration with documentation.
    Config,
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DTX_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| ConfigError(format!("DTX_THREADS=`{v}` is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Generate {
            families,
            count,
            seed,
            out,
        } => commands::generate(&families, count, seed, &out),
        Command::Train { cfg, out, resume } => commands::train(&cfg.load()?, &out, resume.as_deref()),
        Command::Eval {
            cfg,
            checkpoint,
            mode,
            out,
        } => commands::eval(&cfg.load()?, checkpoint.as_deref(), mode, &out),
        Command::Bench { cfg, preset, out } => commands::bench_presets(&cfg.load()?, &preset, out.as_deref()),
        Command::Config => {
            print!("{}", CliConfig::documented());
            Ok(())
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(h) = cause.downcast_ref::<dtx_harness::Error>() {
            return match h {
                dtx_harness::Error::NonFinite { .. } => 4,
                dtx_harness::Error::InvalidArgument(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
