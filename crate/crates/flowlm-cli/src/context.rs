//! Shared command plumbing: path resolution against the data root, run
//! directory naming, and artifact loading that cuts across commands.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use flowlm::discretizer::{load_discretizer, DiscretizerModel};
use flowlm::ingest::{load_flow_table, DomainTag, FlowTable, SchemaMap};
use flowlm::model::ModelCheckpoint;
use flowlm::tensor::Dtype;

use crate::errors::CliError;

pub struct Context {
    data_dir: Option<PathBuf>,
    deterministic: bool,
}

impl Context {
    pub fn new(data_dir: Option<PathBuf>, deterministic: bool) -> Self {
        Context {
            data_dir,
            deterministic,
        }
    }

    /// Numerics are always single-threaded and seed-driven; this flag just
    /// extends the guarantee to artifacts (timing fields are zeroed).
    pub fn deterministic(&self) -> bool {
        self.deterministic
    }

    /// Resolve a user-supplied path: absolute paths and paths that exist
    /// relative to the working directory win; otherwise relative paths are
    /// tried under the data root.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() || path.exists() {
            return path.to_path_buf();
        }
        if let Some(root) = &self.data_dir {
            let candidate = root.join(path);
            if candidate.exists() {
                return candidate;
            }
        }
        path.to_path_buf()
    }

    /// Default artifact directory for a training run: `runs/<timestamp>-seed<seed>`
    /// under the data root (or the working directory without one).
    pub fn default_run_dir(&self, seed: u64) -> PathBuf {
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let base = self
            .data_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("."));
        base.join("runs").join(format!("run-{stamp}-seed{seed}"))
    }
}

/// Load a flow table, surfacing the skip count as a warning.
pub fn load_table(
    ctx: &Context,
    path: &Path,
    domain: DomainTag,
    strict: bool,
    schema: &SchemaMap,
) -> Result<FlowTable, CliError> {
    let resolved = ctx.resolve(path);
    let outcome = load_flow_table(&resolved, domain, strict, schema)?;
    if outcome.skipped > 0 {
        log::warn!(
            "{}: skipped {} malformed row(s)",
            resolved.display(),
            outcome.skipped
        );
    }
    Ok(outcome.table)
}

pub fn load_schema(ctx: &Context, path: Option<&Path>) -> Result<SchemaMap, CliError> {
    match path {
        None => Ok(SchemaMap::default()),
        Some(p) => {
            let resolved = ctx.resolve(p);
            let text = std::fs::read_to_string(&resolved).map_err(|e| {
                CliError::usage(format!("cannot read schema {}: {e}", resolved.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::data(format!("schema {}: {e}", resolved.display())))
        }
    }
}

pub fn load_disc(ctx: &Context, path: &Path) -> Result<DiscretizerModel, CliError> {
    let resolved = ctx.resolve(path);
    Ok(load_discretizer(&resolved)?)
}

/// Checkpoint in whichever precision it was written.
pub enum AnyCheckpoint {
    F32(ModelCheckpoint<f32>),
    F64(ModelCheckpoint<f64>),
}

impl AnyCheckpoint {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyCheckpoint::F32(_) => Dtype::F32,
            AnyCheckpoint::F64(_) => Dtype::F64,
        }
    }
}

/// Read the manifest's dtype tag and load at the matching precision.
pub fn load_any_checkpoint(ctx: &Context, dir: &Path) -> Result<AnyCheckpoint, CliError> {
    let resolved = ctx.resolve(dir);
    let manifest_path = resolved.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        CliError::usage(format!(
            "cannot read checkpoint manifest {}: {e}",
            manifest_path.display()
        ))
    })?;
    let manifest: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::data(format!("{}: {e}", manifest_path.display())))?;
    match manifest["dtype"].as_str() {
        Some("f32") => Ok(AnyCheckpoint::F32(ModelCheckpoint::load(&resolved)?)),
        Some("f64") => Ok(AnyCheckpoint::F64(ModelCheckpoint::load(&resolved)?)),
        other => Err(CliError::data(format!(
            "{}: unsupported dtype {other:?}",
            manifest_path.display()
        ))),
    }
}

/// Write pretty JSON, creating parent directories.
pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
