//! `tempodyn`: expressive tempo and dynamics prediction for piano
//! performances, from musical expectancy and score features.

mod artifacts;
mod commands;
mod config;

use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "tempodyn",
    version,
    about = "Predict expressive tempo and dynamics of piano performances",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a corpus file and print its diagnostics
    Validate(config::Overrides),
    /// Write the expressive target series of every piece as CSV
    Targets(config::Overrides),
    /// Write per-piece feature matrices as CSV
    Features(config::Overrides),
    /// Write expectancy feature matrices (shorthand for features with set E)
    Expectancy(config::Overrides),
    /// Train one model on the whole corpus and save it
    Train(config::Overrides),
    /// Cross-validated evaluation of one feature set and target
    Evaluate(config::Overrides),
    /// Evaluate feature sets E, S, and E+S and test their differences
    Compare(config::Overrides),
    /// Temporal sensitivity map of a model trained on the corpus
    Sensitivity(config::Overrides),
    /// Generate a deterministic synthetic corpus
    Synth(commands::SynthArgs),
}

fn dispatch(command: &Command) -> Result<u8> {
    match command {
        Command::Validate(flags) => commands::run_validate(flags),
        Command::Targets(flags) => commands::run_targets(flags).map(|_| 0),
        Command::Features(flags) => commands::run_features(flags, false).map(|_| 0),
        Command::Expectancy(flags) => commands::run_features(flags, true).map(|_| 0),
        Command::Train(flags) => commands::run_train(flags).map(|_| 0),
        Command::Evaluate(flags) => commands::run_evaluate(flags).map(|_| 0),
        Command::Compare(flags) => commands::run_compare(flags).map(|_| 0),
        Command::Sensitivity(flags) => commands::run_sensitivity(flags).map(|_| 0),
        Command::Synth(args) => commands::run_synth(args).map(|_| 0),
    }
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Validate(_) => "validate",
        Command::Targets(_) => "targets",
        Command::Features(_) => "features",
        Command::Expectancy(_) => "expectancy",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Compare(_) => "compare",
        Command::Sensitivity(_) => "sensitivity",
        Command::Synth(_) => "synth",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            // One machine-readable error record on stderr.
            let chain: Vec<String> = err.chain().skip(1).map(|c| c.to_string()).collect();
            let record = serde_json::json!({
                "status": "error",
                "command": command_name(&cli.command),
                "message": err.to_string(),
                "chain": chain,
            });
            eprintln!("{record}");
            ExitCode::from(1)
        }
    }
}
