//! `flowlm make-splits` — draw evaluation set families from a source table.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use flowlm::ingest::{
    make_eval_splits, preset_composition, write_flow_table_csv, DomainTag, FineLabel, SplitSpec,
};

use crate::context::{self, Context};
use crate::errors::CliError;

#[derive(Debug, Args)]
pub struct MakeSplitsArgs {
    /// Source flow CSV to sample from.
    #[arg(long)]
    pub input: PathBuf,

    /// Published per-set composition; also fixes the domain tag.
    #[arg(long, conflicts_with = "composition")]
    pub preset: Option<DomainTag>,

    /// Custom composition as inline JSON or a JSON file path,
    /// e.g. '{"normal": 100, "dos": 50}'. Requires --domain.
    #[arg(long)]
    pub composition: Option<String>,

    /// Domain tag of the source; implied by --preset.
    #[arg(long)]
    pub domain: Option<DomainTag>,

    /// How many independent sets to draw.
    #[arg(long, default_value_t = 10)]
    pub num_sets: u32,

    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Directory receiving set-NNN.csv files and the split manifest.
    #[arg(long)]
    pub out_dir: PathBuf,

    /// Fail on the first malformed row instead of skipping it.
    #[arg(long)]
    pub strict: bool,

    /// JSON column-name mapping for non-default headers.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

fn parse_composition(raw: &str, ctx: &Context) -> Result<BTreeMap<FineLabel, u64>, CliError> {
    let text = if raw.trim_start().starts_with('{') {
        raw.to_string()
    } else {
        let path = ctx.resolve(raw.as_ref());
        std::fs::read_to_string(&path)
            .map_err(|e| CliError::usage(format!("cannot read composition {}: {e}", path.display())))?
    };
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("composition: {e}")))
}

pub fn run(ctx: &Context, args: MakeSplitsArgs) -> Result<(), CliError> {
    let (domain, composition) = match (&args.preset, &args.composition) {
        (Some(preset), None) => (*preset, preset_composition(*preset)),
        (None, Some(raw)) => {
            let domain = args.domain.ok_or_else(|| {
                CliError::usage("--composition requires --domain".to_string())
            })?;
            (domain, parse_composition(raw, ctx)?)
        }
        (None, None) => {
            return Err(CliError::usage(
                "one of --preset or --composition is required".to_string(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    if let (Some(preset), Some(domain)) = (&args.preset, &args.domain) {
        if preset != domain {
            return Err(CliError::usage(format!(
                "--preset {preset} conflicts with --domain {domain}"
            )));
        }
    }

    let schema = context::load_schema(ctx, args.schema.as_deref())?;
    let table = context::load_table(ctx, &args.input, domain, args.strict, &schema)?;
    let spec = SplitSpec {
        composition,
        num_sets: args.num_sets,
        seed: args.seed,
    };
    let sets = make_eval_splits(&table, &spec)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let mut files = Vec::with_capacity(sets.len());
    for (i, set) in sets.iter().enumerate() {
        let name = format!("set-{i:03}.csv");
        write_flow_table_csv(set, &args.out_dir.join(&name))?;
        files.push(name);
    }

    let manifest = serde_json::json!({
        "source": table.source_path,
        "source_fingerprint": table.fingerprint(),
        "domain": domain,
        "spec": spec,
        "set_size": spec.total(),
        "files": files,
    });
    context::write_json(&args.out_dir.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} set(s) of {} flows to {}",
        sets.len(),
        spec.total(),
        args.out_dir.display()
    );
    Ok(())
}
