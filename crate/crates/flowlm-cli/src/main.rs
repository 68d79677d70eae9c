//! `flowlm` — pipeline driver for flow-sequence intrusion detection.
//!
//! Subcommands cover the full experiment: `ingest` (parse + stats),
//! `make-splits` (evaluation set families), `fit-discretizer`, `pretrain`,
//! `finetune`, `evaluate` (Table-shaped cross-domain report) and `report`
//! (merge evaluation artifacts), plus `synth` to generate the synthetic
//! fixtures. Exit codes: 0 ok, 1 data/validation error, 2 usage or I/O
//! error, 3 artifact fingerprint mismatch.

mod commands;
mod context;
mod errors;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::context::Context;
use crate::errors::CliError;

#[derive(Debug, Parser)]
#[command(name = "flowlm", version, about = "Flow-sequence intrusion detection pipeline")]
struct Cli {
    /// Default root for relative data paths (env: FLOWLM_DATA_DIR).
    #[arg(long, global = true, env = "FLOWLM_DATA_DIR")]
    data_dir: Option<PathBuf>,

    /// Force fully deterministic execution. Numerics here are always
    /// single-threaded and seed-deterministic, so this only asserts the
    /// guarantee for scripted pipelines.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Log progress at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a flow CSV and report its label composition.
    Ingest(commands::ingest::IngestArgs),
    /// Sample evaluation set families with exact per-label composition.
    MakeSplits(commands::splits::MakeSplitsArgs),
    /// Fit quantile bins and the categorical vocabulary on a training table.
    FitDiscretizer(commands::discretizer::FitDiscretizerArgs),
    /// Masked-flow-model pre-training.
    Pretrain(commands::train::PretrainArgs),
    /// Supervised fine-tuning of the per-flow classifier.
    Finetune(commands::train::FinetuneArgs),
    /// Classify evaluation sets and emit the cross-domain report.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Merge evaluation artifacts into one report.
    Report(commands::report::ReportArgs),
    /// Generate synthetic flow CSVs with known structure.
    Synth(commands::synth::SynthArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .format_timestamp(None)
        .init();

    let ctx = Context::new(cli.data_dir.clone(), cli.deterministic);
    let result: Result<(), CliError> = match cli.command {
        Command::Ingest(args) => commands::ingest::run(&ctx, args),
        Command::MakeSplits(args) => commands::splits::run(&ctx, args),
        Command::FitDiscretizer(args) => commands::discretizer::run(&ctx, args),
        Command::Pretrain(args) => commands::train::run_pretrain(&ctx, args),
        Command::Finetune(args) => commands::train::run_finetune(&ctx, args),
        Command::Evaluate(args) => commands::evaluate::run(&ctx, args),
        Command::Report(args) => commands::report::run(&ctx, args),
        Command::Synth(args) => commands::synth::run(&ctx, args),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
