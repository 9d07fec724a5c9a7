//! Command-line driver: dataset generation, architecture search, training,
//! evaluation and ablation sweeps.
//!
//! ```text
//! msinet <gen-data|search|train|eval|sweep> [--config FILE] [--set KEY=VALUE ...] --out DIR
//! ```
//!
//! Exit codes: 0 on success, 1 for configuration errors, 2 for runtime
//! failures. `MSINET_LOG` sets the log filter (default `warn`).

pub mod commands;
pub mod config;
pub mod metrics;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

pub use config::{parse_config, ArchChoice, Preset, RunConfig, SweepAxis};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] msinet_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Write the synthetic dataset as a manifest plus PPM images.
    GenData,
    /// Search an architecture; writes the descriptor and logit history.
    Search,
    /// Train an architecture; writes initial and final checkpoints.
    Train,
    /// Evaluate a checkpoint on the probe/gallery split.
    Eval,
    /// Train and evaluate once per value of an ablation axis.
    Sweep,
}

#[derive(Debug, Parser)]
#[command(name = "msinet", version, about = "Architecture search and retrieval training on identity datasets")]
struct Cli {
    command: Command,
    /// Config file of `section.key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; applied after the config file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for artifacts and logs.
    #[arg(long)]
    out: PathBuf,
}

/// Runs one command with a resolved config.
pub fn execute(command: Command, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    match command {
        Command::GenData => {
            let manifest = commands::gen_data(cfg, out)?;
            println!("{}", manifest.display());
        }
        Command::Search => {
            let d = commands::search(cfg, out)?;
            println!("{}", d.ops_string());
        }
        Command::Train => {
            commands::train(cfg, out, None)?;
            println!("{}", out.join(commands::CHECKPOINT).display());
        }
        Command::Eval => {
            let res = commands::eval(cfg, out)?;
            println!("{}", serde_json::to_string(&res).expect("plain numbers serialize"));
        }
        Command::Sweep => {
            commands::sweep(cfg, out)?;
            println!("{}", out.join(commands::SWEEP_SUMMARY).display());
        }
    }
    Ok(())
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: cannot read config: {e}", path.display())))?,
        None => String::new(),
    };
    parse_config(&text, &cli.set)
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = load(&cli).and_then(|cfg| execute(cli.command, &cfg, &cli.out));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("msinet: {e}");
            e.exit_code()
        }
    }
}
