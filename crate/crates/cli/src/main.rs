mod commands;
mod config;
mod error;

use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::CliError;

/// Selective memorization for continual language modeling.
#[derive(Parser, Debug)]
#[command(name = "semem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split raw corpus files into chronological batches with train/valid/test splits
    Prepare(commands::PrepareArgs),
    /// Generate a seeded synthetic stream in the same layout as `prepare`
    Synth(commands::SynthArgs),
    /// Train the reference language model
    TrainLm(commands::TrainLmArgs),
    /// Stream batches through a memorization policy, evaluating at checkpoints
    RunCl(commands::RunClArgs),
    /// Evaluate a language model, optionally with a run's memory and calibrator
    Eval(commands::EvalArgs),
    /// Fit a calibrator against a finished run's memory
    Calibrate(commands::CalibrateArgs),
    /// Summarize a finished run and rewrite its report tables
    Stats(commands::StatsArgs),
}

fn dispatch(command: &Command) -> Result<serde_json::Value, CliError> {
    match command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Synth(a) => commands::synth(a),
        Command::TrainLm(a) => commands::train_lm(a),
        Command::RunCl(a) => commands::run_cl(a),
        Command::Eval(a) => commands::eval(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Stats(a) => commands::stats(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(error::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(&cli.command) {
        Ok(summary) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
