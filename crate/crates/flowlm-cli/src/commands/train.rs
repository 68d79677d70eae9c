//! `flowlm pretrain` / `flowlm finetune` — training entry points.
//!
//! Configuration is resolved defaults < `--config` JSON < flags, and the
//! resolved document is echoed to stderr and written into the run directory.
//! When initializing or resuming from a checkpoint, model shape and precision
//! come from the checkpoint; overrides must agree with it.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use flowlm::discretizer::DiscretizerModel;
use flowlm::ingest::DomainTag;
use flowlm::model::{FlowModel, ModelCheckpoint, ModelConfig, TrainPhase};
use flowlm::optim::OptimConfig;
use flowlm::tensor::{Dtype, Scalar};
use flowlm::trainer::{self, Session, TrainConfig, TrainReport};
use flowlm::{TokenizedTable, NUM_FEATURES};

use crate::context::{self, AnyCheckpoint, Context};
use crate::errors::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training flow CSV.
    #[arg(long)]
    pub input: PathBuf,

    /// Label semantics of the source.
    #[arg(long)]
    pub domain: DomainTag,

    /// Fitted discretizer JSON the run is bound to.
    #[arg(long)]
    pub discretizer: PathBuf,

    /// Artifact directory; defaults to runs/run-<timestamp>-seed<seed>.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,

    /// JSON config document; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Fail on the first malformed row instead of skipping it.
    #[arg(long)]
    pub strict: bool,

    /// JSON column-name mapping for non-default headers.
    #[arg(long)]
    pub schema: Option<PathBuf>,

    /// Optimizer steps to run (total across resumes).
    #[arg(long)]
    pub steps: Option<u64>,

    /// Sequences per batch.
    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Flow window length L.
    #[arg(long)]
    pub seq_len: Option<usize>,

    /// Peak learning rate after warmup.
    #[arg(long)]
    pub peak_lr: Option<f64>,

    /// Linear warmup steps.
    #[arg(long)]
    pub warmup: Option<u64>,

    /// MLM corruption rate (pretraining only).
    #[arg(long)]
    pub mask_rate: Option<f64>,

    /// Root seed for init, segment sampling, masking and dropout.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Intermediate checkpoint cadence in steps; 0 disables.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,

    /// Progress log cadence in steps.
    #[arg(long)]
    pub log_every: Option<u64>,

    /// Per-feature embedding width E (token width is 6E).
    #[arg(long)]
    pub embed_dim: Option<usize>,

    /// Encoder depth N.
    #[arg(long)]
    pub layers: Option<usize>,

    /// Attention heads A.
    #[arg(long)]
    pub heads: Option<usize>,

    /// Feed-forward inner width F.
    #[arg(long)]
    pub ffn_dim: Option<usize>,

    /// Positional table length L_max.
    #[arg(long)]
    pub max_seq_len: Option<usize>,

    /// Dropout rate in [0, 1).
    #[arg(long)]
    pub dropout: Option<f64>,

    /// Floating-point width of parameters and training math.
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: TrainArgs,

    /// Continue an interrupted pretraining run from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: TrainArgs,

    /// Start from this (typically pretrained) checkpoint's weights with a
    /// fresh optimizer.
    #[arg(long)]
    pub init: Option<PathBuf>,

    /// Continue an interrupted finetuning run from this checkpoint.
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
}

/// Optional fields of the `--config` document; flags win over these.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    steps: Option<u64>,
    batch_size: Option<usize>,
    seq_len: Option<usize>,
    peak_lr: Option<f64>,
    warmup: Option<u64>,
    mask_rate: Option<f64>,
    seed: Option<u64>,
    checkpoint_every: Option<u64>,
    log_every: Option<u64>,
    embed_dim: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    ffn_dim: Option<usize>,
    max_seq_len: Option<usize>,
    dropout: Option<f64>,
    precision: Option<Precision>,
}

fn load_config_file(ctx: &Context, path: Option<&Path>) -> Result<ConfigFile, CliError> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let resolved = ctx.resolve(p);
            let text = std::fs::read_to_string(&resolved).map_err(|e| {
                CliError::usage(format!("cannot read config {}: {e}", resolved.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::data(format!("config {}: {e}", resolved.display())))
        }
    }
}

fn resolve_train(flags: &TrainArgs, file: &ConfigFile) -> TrainConfig {
    let steps = flags.steps.or(file.steps).unwrap_or(1000);
    let seed = flags.seed.or(file.seed).unwrap_or(0);
    let peak_lr = flags.peak_lr.or(file.peak_lr).unwrap_or(1e-4);
    let warmup = flags.warmup.or(file.warmup).unwrap_or(steps.min(1000));
    TrainConfig {
        steps,
        batch_size: flags.batch_size.or(file.batch_size).unwrap_or(64),
        seq_len: flags.seq_len.or(file.seq_len).unwrap_or(32),
        optim: OptimConfig::new(peak_lr, warmup, steps),
        mask_rate: flags.mask_rate.or(file.mask_rate).unwrap_or(0.15),
        seed,
        checkpoint_every: flags.checkpoint_every.or(file.checkpoint_every).unwrap_or(0),
        log_every: flags.log_every.or(file.log_every).unwrap_or(100),
    }
}

/// Overlay shape overrides on `base` (published defaults or a checkpoint's
/// recorded config).
fn resolve_shape(base: ModelConfig, flags: &TrainArgs, file: &ConfigFile) -> ModelConfig {
    let mut m = base;
    if let Some(e) = flags.embed_dim.or(file.embed_dim) {
        m.per_feature_dim = e;
        m.token_dim = NUM_FEATURES * e;
    }
    if let Some(n) = flags.layers.or(file.layers) {
        m.layers = n;
    }
    if let Some(a) = flags.heads.or(file.heads) {
        m.heads = a;
    }
    if let Some(f) = flags.ffn_dim.or(file.ffn_dim) {
        m.ffn_dim = f;
    }
    if let Some(l) = flags.max_seq_len.or(file.max_seq_len) {
        m.max_seq_len = l;
    }
    if let Some(d) = flags.dropout.or(file.dropout) {
        m.dropout = d;
    }
    m
}

/// How the session obtains its parameters.
enum Init {
    /// Random initialization from the resolved shape.
    Fresh,
    /// Checkpoint weights, fresh optimizer at step 0.
    Warm(PathBuf),
    /// Checkpoint weights, optimizer state and step counter.
    Resume(PathBuf),
}

impl Init {
    fn checkpoint_path(&self) -> Option<&Path> {
        match self {
            Init::Fresh => None,
            Init::Warm(p) | Init::Resume(p) => Some(p),
        }
    }

    fn describe(&self) -> String {
        match self {
            Init::Fresh => "random".to_string(),
            Init::Warm(p) => format!("checkpoint:{}", p.display()),
            Init::Resume(p) => format!("resume:{}", p.display()),
        }
    }
}

pub fn run_pretrain(ctx: &Context, args: PretrainArgs) -> Result<(), CliError> {
    let init = match &args.resume {
        Some(p) => Init::Resume(p.clone()),
        None => Init::Fresh,
    };
    run_common(ctx, args.common, TrainPhase::Pretrained, init)
}

pub fn run_finetune(ctx: &Context, args: FinetuneArgs) -> Result<(), CliError> {
    let init = match (&args.init, &args.resume) {
        (Some(p), None) => Init::Warm(p.clone()),
        (None, Some(p)) => Init::Resume(p.clone()),
        (None, None) => Init::Fresh,
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    run_common(ctx, args.common, TrainPhase::Finetuned, init)
}

fn run_common(
    ctx: &Context,
    args: TrainArgs,
    phase: TrainPhase,
    init: Init,
) -> Result<(), CliError> {
    let file = load_config_file(ctx, args.config.as_deref())?;
    let train = resolve_train(&args, &file);

    let disc = context::load_disc(ctx, &args.discretizer)?;
    let schema = context::load_schema(ctx, args.schema.as_deref())?;
    let flow_table = context::load_table(ctx, &args.input, args.domain, args.strict, &schema)?;
    let table = disc.transform_table(&flow_table);

    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| ctx.default_run_dir(train.seed));
    std::fs::create_dir_all(&out_dir)?;

    let loaded = match init.checkpoint_path() {
        None => None,
        Some(p) => Some(context::load_any_checkpoint(ctx, p)?),
    };

    let precision = args.precision.or(file.precision);
    let (dtype, base_shape) = match &loaded {
        None => (
            precision.unwrap_or(Precision::F32).dtype(),
            ModelConfig::with_vocab(disc.vocab_sizes),
        ),
        Some(ckpt) => {
            if let Some(p) = precision {
                if p.dtype() != ckpt.dtype() {
                    return Err(CliError::usage(format!(
                        "--precision {:?} disagrees with the checkpoint ({:?})",
                        p.dtype(),
                        ckpt.dtype()
                    )));
                }
            }
            let config = match ckpt {
                AnyCheckpoint::F32(c) => c.config.clone(),
                AnyCheckpoint::F64(c) => c.config.clone(),
            };
            (ckpt.dtype(), config)
        }
    };

    let model_config = resolve_shape(base_shape.clone(), &args, &file);
    if loaded.is_some() && model_config != base_shape {
        return Err(CliError::usage(
            "model shape comes from the initialization checkpoint; \
             shape overrides must match it"
                .to_string(),
        ));
    }
    if train.seq_len > model_config.max_seq_len {
        return Err(CliError::usage(format!(
            "seq_len {} exceeds the model's max_seq_len {}",
            train.seq_len, model_config.max_seq_len
        )));
    }

    let resolved = serde_json::json!({
        "command": match phase {
            TrainPhase::Pretrained => "pretrain",
            TrainPhase::Finetuned => "finetune",
        },
        "input": flow_table.source_path,
        "input_fingerprint": flow_table.fingerprint(),
        "domain": args.domain,
        "discretizer": ctx.resolve(&args.discretizer),
        "discretizer_fingerprint": disc.fingerprint(),
        "out_dir": out_dir,
        "initialized_from": init.describe(),
        "precision": dtype,
        "model": model_config,
        "train": train,
        "deterministic": ctx.deterministic(),
    });
    eprintln!("{}", serde_json::to_string_pretty(&resolved)?);
    context::write_json(&out_dir.join("config.json"), &resolved)?;

    let report = match (loaded, dtype) {
        (None, Dtype::F32) => {
            execute::<f32>(&init, None, model_config, &disc, &table, &train, phase, &out_dir)?
        }
        (None, Dtype::F64) => {
            execute::<f64>(&init, None, model_config, &disc, &table, &train, phase, &out_dir)?
        }
        (Some(AnyCheckpoint::F32(c)), _) => {
            execute::<f32>(&init, Some(c), model_config, &disc, &table, &train, phase, &out_dir)?
        }
        (Some(AnyCheckpoint::F64(c)), _) => {
            execute::<f64>(&init, Some(c), model_config, &disc, &table, &train, phase, &out_dir)?
        }
    };

    if ctx.deterministic() {
        // Wall-clock time is the one nondeterministic report field; zero it
        // so reruns produce byte-identical artifacts.
        let mut scrubbed = report.clone();
        scrubbed.wall_clock_secs = 0.0;
        context::write_json(&out_dir.join("report.json"), &serde_json::to_value(&scrubbed)?)?;
    }

    let last = report.loss_curve.last().map_or(f64::NAN, |p| p.loss);
    println!(
        "{} finished: {} steps, final loss {:.4}, artifacts in {}",
        report.phase,
        report.steps,
        last,
        out_dir.display()
    );
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn execute<T: Scalar>(
    init: &Init,
    ckpt: Option<ModelCheckpoint<T>>,
    model_config: ModelConfig,
    disc: &DiscretizerModel,
    table: &TokenizedTable,
    train: &TrainConfig,
    phase: TrainPhase,
    out_dir: &Path,
) -> Result<TrainReport, CliError> {
    let fingerprint = disc.fingerprint();
    let session = match (init, ckpt) {
        (Init::Fresh, None) => Session::fresh(
            FlowModel::<T>::new(model_config, train.seed)?,
            fingerprint,
        ),
        (Init::Warm(path), Some(ckpt)) => {
            ckpt.validate_against(disc)?;
            let model = FlowModel::from_parts(ckpt.config, ckpt.params)?;
            let mut session = Session::fresh(model, fingerprint);
            session.initialized_from = format!("checkpoint:{}", path.display());
            session
        }
        (Init::Resume(path), Some(ckpt)) => {
            ckpt.validate_against(disc)?;
            if ckpt.meta.phase != phase {
                return Err(CliError::data(format!(
                    "cannot resume a {} run as {}",
                    ckpt.meta.phase, phase
                )));
            }
            Session::resume_from(ckpt, path)?
        }
        _ => unreachable!("checkpoint presence follows the init mode"),
    };
    let session = session.with_out_dir(out_dir);
    let outcome = match phase {
        TrainPhase::Pretrained => trainer::pretrain(session, table, train)?,
        TrainPhase::Finetuned => trainer::finetune(session, table, train)?,
    };
    Ok(outcome.report)
}
