//! `flowlm evaluate` — classify evaluation sets and render the cross-domain
//! report.
//!
//! Sets are bound with repeated `--sets domain=glob` flags; per domain the
//! matched files become set 0, 1, … in sorted path order.

use std::path::PathBuf;
use std::str::FromStr;

use clap::Args;
use flowlm::discretizer::DiscretizerModel;
use flowlm::evaluator::{aggregate_runs, compute_metrics, confusion, predict_with_checkpoint};
use flowlm::ingest::{DomainTag, SchemaMap};
use flowlm::model::ModelCheckpoint;
use flowlm::tensor::Scalar;
use flowlm::{AggregateReport, EvalMetrics};

use crate::context::{self, AnyCheckpoint, Context};
use crate::errors::CliError;

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Fine-tuned checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Discretizer the checkpoint was trained against.
    #[arg(long)]
    pub discretizer: PathBuf,

    /// Evaluation window length; defaults to the model's positional capacity.
    #[arg(long)]
    pub seq_len: Option<usize>,

    /// Domain-to-files binding, repeatable: --sets cidds1-internal='int/set-*.csv'.
    #[arg(long = "sets", value_name = "DOMAIN=GLOB", required = true)]
    pub sets: Vec<String>,

    /// Report JSON output path (text always goes to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Fail on the first malformed row instead of skipping it.
    #[arg(long)]
    pub strict: bool,

    /// JSON column-name mapping for non-default headers.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

/// Parsed `--sets` bindings: domains in first-appearance order, each with its
/// matched files in sorted order.
fn resolve_sets(ctx: &Context, raw: &[String]) -> Result<Vec<(DomainTag, Vec<PathBuf>)>, CliError> {
    let mut order: Vec<DomainTag> = Vec::new();
    let mut files: Vec<Vec<PathBuf>> = Vec::new();
    for binding in raw {
        let (domain, pattern) = binding.split_once('=').ok_or_else(|| {
            CliError::usage(format!("--sets needs DOMAIN=GLOB, got {binding:?}"))
        })?;
        let domain = DomainTag::from_str(domain).map_err(CliError::Usage)?;
        let pattern = ctx.resolve(pattern.as_ref());
        let pattern = pattern
            .to_str()
            .ok_or_else(|| CliError::usage(format!("non-UTF-8 glob {pattern:?}")))?;
        let mut matched: Vec<PathBuf> = glob::glob(pattern)
            .map_err(|e| CliError::usage(format!("bad glob {pattern:?}: {e}")))?
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::usage(format!("glob {pattern:?}: {e}")))?;
        matched.sort();
        if matched.is_empty() {
            log::warn!("glob {pattern:?} matched no files");
        }
        match order.iter().position(|d| d == &domain) {
            Some(i) => files[i].extend(matched),
            None => {
                order.push(domain);
                files.push(matched);
            }
        }
    }
    Ok(order.into_iter().zip(files).collect())
}

pub fn run(ctx: &Context, args: EvaluateArgs) -> Result<(), CliError> {
    let disc = context::load_disc(ctx, &args.discretizer)?;
    let schema = context::load_schema(ctx, args.schema.as_deref())?;
    let sets = resolve_sets(ctx, &args.sets)?;

    let report = match context::load_any_checkpoint(ctx, &args.checkpoint)? {
        AnyCheckpoint::F32(ckpt) => {
            evaluate_all(ctx, &ckpt, &disc, &schema, &sets, args.seq_len, args.strict)?
        }
        AnyCheckpoint::F64(ckpt) => {
            evaluate_all(ctx, &ckpt, &disc, &schema, &sets, args.seq_len, args.strict)?
        }
    };

    print!("{}", report.render_text());
    for d in &report.domains {
        for w in &d.warnings {
            eprintln!("warning: {}: {w}", d.domain);
        }
    }
    if let Some(out) = &args.out {
        context::write_json(out, &report.to_json())?;
    }
    Ok(())
}

fn evaluate_all<T: Scalar>(
    ctx: &Context,
    ckpt: &ModelCheckpoint<T>,
    disc: &DiscretizerModel,
    schema: &SchemaMap,
    sets: &[(DomainTag, Vec<PathBuf>)],
    seq_len: Option<usize>,
    strict: bool,
) -> Result<AggregateReport, CliError> {
    let seq_len = seq_len.unwrap_or(ckpt.config.max_seq_len);
    if seq_len == 0 || seq_len > ckpt.config.max_seq_len {
        return Err(CliError::usage(format!(
            "seq_len {seq_len} outside the model's 1..={} window",
            ckpt.config.max_seq_len
        )));
    }

    let mut domains = Vec::with_capacity(sets.len());
    for (domain, files) in sets {
        let mut metrics: Vec<EvalMetrics> = Vec::with_capacity(files.len());
        for (set_id, file) in files.iter().enumerate() {
            let table = context::load_table(ctx, file, *domain, strict, schema)?;
            let tokenized = disc.transform_table(&table);
            let predictions = predict_with_checkpoint(ckpt, &tokenized, seq_len)?;
            let m = compute_metrics(confusion(&predictions), set_id as u32);
            log::info!(
                "{domain} set {set_id} ({}): accuracy {:.4}, f1 {:.4}",
                file.display(),
                m.accuracy,
                m.f1
            );
            metrics.push(m);
        }
        domains.push(aggregate_runs(domain.as_str(), metrics));
    }
    Ok(AggregateReport { domains })
}
