//! Command-line driver: train the prior, train PViT, score, evaluate, dump
//! attention maps and export logits. All outputs are plain text files
//! under the run's output directory.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] pvit::Error),
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for bad data or files.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_data_error() => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pvit", version, about = "Prior-augmented ViT OOD detection")]
pub struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Overrides the `out` key.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides any config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train the prior classifier and export its logits for every split.
    TrainPrior,
    /// Train PViT with per-sample prior tokens.
    TrainPvit,
    /// Write score files for ID-test and every OOD set.
    Score,
    /// Compute AUROC / FPR95 and histograms from score files.
    Eval,
    /// Write attention matrices and prior-token attention mass.
    AttentionDump,
    /// Export prior or PViT logits for every split.
    ExportLogits,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainPrior => "train-prior",
            Command::TrainPvit => "train-pvit",
            Command::Score => "score",
            Command::Eval => "eval",
            Command::AttentionDump => "attention-dump",
            Command::ExportLogits => "export-logits",
        }
    }
}

/// The config file (or defaults) with `--seed`, `--out` and `--set` applied.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &cli.out {
        cfg.set("out", &out.to_string_lossy())?;
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    commands::run(cli.command, &cfg)
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Messages go to stderr.
pub fn run<I, T>(args: I) -> u8
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
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
