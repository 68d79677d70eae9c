//! `flowlm ingest` — parse a flow CSV and report its composition.

use std::path::PathBuf;

use clap::Args;
use flowlm::ingest::{dataset_stats, DomainTag};

use crate::context::{self, Context};
use crate::errors::CliError;

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Flow CSV to parse.
    #[arg(long)]
    pub input: PathBuf,

    /// Label semantics of the source (cidds1-internal, cidds1-external, cidds2).
    #[arg(long)]
    pub domain: DomainTag,

    /// Fail on the first malformed row instead of skipping it.
    #[arg(long)]
    pub strict: bool,

    /// JSON column-name mapping for non-default headers.
    #[arg(long)]
    pub schema: Option<PathBuf>,

    /// Also write the composition stats to this JSON file.
    #[arg(long)]
    pub stats_out: Option<PathBuf>,

    /// Re-export the parsed table (source columns plus resolved labels).
    #[arg(long)]
    pub export: Option<PathBuf>,
}

pub fn run(ctx: &Context, args: IngestArgs) -> Result<(), CliError> {
    let schema = context::load_schema(ctx, args.schema.as_deref())?;
    let table = context::load_table(ctx, &args.input, args.domain, args.strict, &schema)?;

    let stats = dataset_stats(&table);
    let doc = serde_json::json!({
        "source": table.source_path,
        "domain": table.domain_tag,
        "fingerprint": table.fingerprint(),
        "total": stats.total,
        "counts": stats.counts,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    if let Some(out) = &args.stats_out {
        context::write_json(out, &doc)?;
    }
    if let Some(out) = &args.export {
        flowlm::ingest::write_flow_table_csv(&table, out)?;
        log::info!("exported {} rows to {}", table.records.len(), out.display());
    }
    Ok(())
}
