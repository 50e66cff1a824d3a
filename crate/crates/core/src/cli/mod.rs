//! Command-line front end.
//!
//! ```text
//! harvest-cusum --config run.toml --out results stationary
//! harvest-cusum --config run.toml --out results constants
//! harvest-cusum --config run.toml --out results predict
//! harvest-cusum --config run.toml --out results simulate delay
//! harvest-cusum --out results report results/manifest_predict.toml results/manifest_simulate-delay.toml
//! ```
//!
//! Exit codes: 0 ok, 1 configuration error, 2 regime or precondition
//! error, 3 numerical non-convergence.

mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use commands::SimMode;
use commands::Context;
use config::Config;

use crate::error::{Error, Result};
use crate::rng::with_workers;

#[derive(Debug, Parser)]
#[command(name = "harvest-cusum", version, about = "CUSUM change detection with energy-harvesting sensors")]
pub struct Cli {
    /// TOML configuration, or a manifest from an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the Monte Carlo loops (results do not depend on it).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the stationary battery density and the gate chain.
    Stationary,
    /// Estimate the renewal constants and cache them in the output directory.
    Constants,
    /// Asymptotic delay and false-alarm predictions.
    Predict,
    /// Monte Carlo detection delays or false-alarm run lengths.
    Simulate {
        #[arg(value_enum)]
        mode: ModeArg,
    },
    /// Join prediction and simulation manifests into a comparison table.
    Report { manifests: Vec<PathBuf> },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Delay,
    Fa,
}

fn context(cli: &Cli) -> Result<Context> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let mut cfg = Config::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed)?;
    }
    Ok(Context { cfg, out: cli.out.clone() })
}

/// Runs one invocation and returns the path of the manifest it wrote.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", cli.out.display())))?;
    with_workers(cli.workers, || match &cli.command {
        Command::Report { manifests } => commands::cmd_report(manifests, &cli.out),
        Command::Stationary => commands::cmd_stationary(&context(cli)?),
        Command::Constants => commands::cmd_constants(&context(cli)?),
        Command::Predict => commands::cmd_predict(&context(cli)?),
        Command::Simulate { mode } => {
            let mode = match mode {
                ModeArg::Delay => SimMode::Delay,
                ModeArg::Fa => SimMode::FalseAlarm,
            };
            commands::cmd_simulate(&context(cli)?, mode)
        }
    })
}

/// Parses `args`, runs, reports errors on stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(manifest) => {
            println!("manifest: {}", manifest.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
