//! `flowlm synth` — deterministic synthetic flow CSVs for pipeline testing.

use std::path::PathBuf;

use clap::Args;
use flowlm::ingest::DomainTag;
use flowlm::synth::{write_synth_csv, SynthConfig, SynthKind};

use crate::context::Context;
use crate::errors::CliError;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Fixture family: "parity" (neighbor-predictable stream) or
    /// "port-rule" (label decided by destination port).
    #[arg(long)]
    pub kind: SynthKind,

    #[arg(long, default_value_t = 10_000)]
    pub rows: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Domain tag stamped on the generated rows.
    #[arg(long, default_value = "cidds1-internal")]
    pub domain: DomainTag,

    /// CSV output path.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn run(_ctx: &Context, args: SynthArgs) -> Result<(), CliError> {
    if args.rows == 0 {
        return Err(CliError::usage("--rows must be positive".to_string()));
    }
    if let Some(parent) = args.output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let config = SynthConfig {
        rows: args.rows,
        seed: args.seed,
        kind: args.kind,
        domain: args.domain,
    };
    write_synth_csv(&config, &args.output)?;
    println!("wrote {} rows to {}", args.rows, args.output.display());
    Ok(())
}
