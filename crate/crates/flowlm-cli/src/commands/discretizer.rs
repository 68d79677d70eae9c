//! `flowlm fit-discretizer` — fit bins and vocabulary on a training table.

use std::path::PathBuf;

use clap::Args;
use flowlm::discretizer::{fit_discretizer, save_discretizer, DiscretizerConfig};
use flowlm::ingest::DomainTag;
use flowlm::FEATURE_NAMES;

use crate::context::{self, Context};
use crate::errors::CliError;

#[derive(Debug, Args)]
pub struct FitDiscretizerArgs {
    /// Training flow CSV to fit on.
    #[arg(long)]
    pub input: PathBuf,

    /// Label semantics of the source.
    #[arg(long)]
    pub domain: DomainTag,

    /// Quantile bin count per numeric feature.
    #[arg(long, default_value_t = 32)]
    pub bins: usize,

    /// Where the fitted discretizer JSON lands.
    #[arg(long)]
    pub output: PathBuf,

    /// Fail on the first malformed row instead of skipping it.
    #[arg(long)]
    pub strict: bool,

    /// JSON column-name mapping for non-default headers.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

pub fn run(ctx: &Context, args: FitDiscretizerArgs) -> Result<(), CliError> {
    let schema = context::load_schema(ctx, args.schema.as_deref())?;
    let table = context::load_table(ctx, &args.input, args.domain, args.strict, &schema)?;

    let model = fit_discretizer(&table, DiscretizerConfig { bins: args.bins })?;
    if let Some(parent) = args.output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_discretizer(&model, &args.output)?;

    let vocab: serde_json::Map<String, serde_json::Value> = FEATURE_NAMES
        .iter()
        .zip(model.vocab_sizes.iter())
        .map(|(name, &v)| ((*name).to_string(), serde_json::json!(v)))
        .collect();
    let doc = serde_json::json!({
        "output": args.output,
        "bins": model.bins,
        "vocab_sizes": vocab,
        "fingerprint": model.fingerprint(),
        "fit_rows": table.records.len(),
        "fit_fingerprint": model.fit_fingerprint,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}
