//! `flowlm report` — merge per-domain evaluation JSONs into one table.

use std::path::PathBuf;

use clap::Args;
use flowlm::{AggregateReport, DomainReport};
use indexmap::IndexMap;

use crate::context::{self, Context};
use crate::errors::CliError;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation report JSONs ({domain: {accuracy, f1, sets}} documents).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,

    /// Merged report JSON output path (text always goes to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(ctx: &Context, args: ReportArgs) -> Result<(), CliError> {
    let mut domains: Vec<DomainReport> = Vec::new();
    for input in &args.inputs {
        let path = ctx.resolve(input);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        let parsed: IndexMap<String, DomainReport> = serde_json::from_str(&text)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        for (name, report) in parsed {
            if domains.iter().any(|d| d.domain == name) {
                return Err(CliError::data(format!(
                    "domain {name:?} appears in more than one input"
                )));
            }
            if report.domain != name {
                return Err(CliError::data(format!(
                    "{}: entry {name:?} carries domain {:?}",
                    path.display(),
                    report.domain
                )));
            }
            domains.push(report);
        }
    }

    let report = AggregateReport { domains };
    print!("{}", report.render_text());
    if let Some(out) = &args.out {
        context::write_json(out, &report.to_json())?;
    }
    Ok(())
}
