//! `textsmooth`: pretrain a teacher, smooth a dataset, train students and compare them.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::ConfigError;
use config::{ExperimentConfig, RawConfig};

#[derive(Parser)]
#[command(name = "textsmooth", version, about = "Text smoothing distillation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Run {
    /// Experiment config file (`key = value` lines).
    config: PathBuf,
    /// Overrides for any config key, as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the teacher with masked language modelling.
    Pretrain(Run),
    /// Smooth the training set with the teacher and cache the result.
    Smooth(Run),
    /// Train a student on the smoothed cache.
    Distill(Run),
    /// Fine-tune a student on the raw training set.
    Finetune(Run),
    /// Train a student with soft-label distillation.
    Kd(Run),
    /// Rank sentences sampled from smoothed input text (`--text` or `--input`).
    Sample(Run),
    /// Run every method over every seed and summarize.
    Compare(Run),
}

fn load(run: &Run) -> anyhow::Result<ExperimentConfig> {
    let mut raw = RawConfig::load(&run.config).map_err(ConfigError)?;
    raw.apply_overrides(&run.overrides).map_err(ConfigError)?;
    Ok(ExperimentConfig::from_raw(raw).map_err(ConfigError)?)
}

fn dispatch(command: &Command) -> anyhow::Result<()> {
    let (run, f): (&Run, fn(&ExperimentConfig) -> anyhow::Result<()>) = match command {
        Command::Pretrain(r) => (r, commands::pretrain),
        Command::Smooth(r) => (r, commands::smooth),
        Command::Distill(r) => (r, commands::distill),
        Command::Finetune(r) => (r, commands::finetune),
        Command::Kd(r) => (r, commands::kd),
        Command::Sample(r) => (r, commands::sample),
        Command::Compare(r) => (r, commands::compare),
    };
    f(&load(run)?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
