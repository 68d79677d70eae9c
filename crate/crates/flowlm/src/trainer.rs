//! Pre-training and fine-tuning loops.
//!
//! All randomness descends from one root seed through named streams
//! (`rng::stream_rng` / `rng::step_rng`): parameter init, segment sampling,
//! MLM masking and dropout each get their own stream, and the per-step
//! streams are keyed by the absolute step index. A run checkpointed at step
//! j and resumed therefore replays steps j..k with the exact batches and
//! dropout masks of an uninterrupted run; together with the Adam moments
//! stored in the checkpoint this makes resume bitwise equivalent.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretizer::TokenizedTable;
use crate::model::checkpoint::{CheckpointError, OptimizerSnapshot};
use crate::model::{FlowModel, ModelCheckpoint, ModelError, TrainPhase, TrainingMeta};
use crate::optim::{Adam, OptimConfig};
use crate::rng::step_rng;
use crate::sequencer::{
    apply_mlm_mask, collate_batch, collate_masked_batch, sample_training_segment, SequencerError,
};
use crate::tensor::Scalar;

/// Knobs for one training run; paths and data stay outside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Window length L sampled per batch element.
    pub seq_len: usize,
    pub optim: OptimConfig,
    /// Fraction of real positions the MLM objective corrupts (pretrain).
    pub mask_rate: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Progress log cadence in steps.
    pub log_every: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: batch 64, L=32, peak lr 1e-4 after 1000 warmup
    /// steps with linear decay, mask rate 0.15.
    pub fn defaults_for(steps: u64, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch_size: 64,
            seq_len: 32,
            optim: OptimConfig::new(1e-4, steps.min(1000), steps),
            mask_rate: 0.15,
            seed,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
}

/// Run summary; the loss curve holds one entry per executed step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: TrainPhase,
    pub seed: u64,
    pub steps: u64,
    /// "random" or "checkpoint:<path>"; how parameters were initialized.
    pub initialized_from: String,
    pub loss_curve: Vec<LossPoint>,
    pub wall_clock_secs: f64,
    pub final_checkpoint: Option<PathBuf>,
    pub config: TrainConfig,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sequencer(#[from] SequencerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything a training call needs besides the data table.
pub struct Session<'a, T: Scalar> {
    pub model: FlowModel<T>,
    /// Adam moments carried over when resuming; `None` starts fresh.
    pub resume: Option<OptimizerSnapshot<T>>,
    /// Step index training starts from (0 for fresh runs).
    pub start_step: u64,
    pub discretizer_fingerprint: String,
    /// Checkpoints, report and loss CSV land here when set.
    pub out_dir: Option<&'a Path>,
    /// Provenance string echoed into the report.
    pub initialized_from: String,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn fresh(model: FlowModel<T>, discretizer_fingerprint: String) -> Self {
        Session {
            model,
            resume: None,
            start_step: 0,
            discretizer_fingerprint,
            out_dir: None,
            initialized_from: "random".to_string(),
        }
    }

    /// Continue from a loaded checkpoint (parameters, step and Adam state).
    pub fn resume_from(ckpt: ModelCheckpoint<T>, origin: &Path) -> Result<Self, TrainError> {
        let step = ckpt.meta.step;
        let optimizer = ckpt.optimizer;
        let model = FlowModel::from_parts(ckpt.config, ckpt.params)?;
        Ok(Session {
            model,
            resume: optimizer,
            start_step: step,
            discretizer_fingerprint: ckpt.discretizer_fingerprint,
            out_dir: None,
            initialized_from: format!("checkpoint:{}", origin.display()),
        })
    }

    pub fn with_out_dir(mut self, dir: &'a Path) -> Self {
        self.out_dir = Some(dir);
        self
    }
}

/// Outcome of a run: the trained model plus its report, and the final Adam
/// state for callers that keep training.
pub struct TrainOutcome<T: Scalar> {
    pub model: FlowModel<T>,
    pub optimizer: OptimizerSnapshot<T>,
    pub report: TrainReport,
}

/// MLM pre-training over unlabeled flow windows.
pub fn pretrain<T: Scalar>(
    session: Session<'_, T>,
    table: &TokenizedTable,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    run(session, table, config, TrainPhase::Pretrained)
}

/// Supervised fine-tuning of the classification head (and the full stack)
/// over labeled flow windows.
pub fn finetune<T: Scalar>(
    session: Session<'_, T>,
    table: &TokenizedTable,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    run(session, table, config, TrainPhase::Finetuned)
}

fn run<T: Scalar>(
    session: Session<'_, T>,
    table: &TokenizedTable,
    config: &TrainConfig,
    phase: TrainPhase,
) -> Result<TrainOutcome<T>, TrainError> {
    let Session {
        mut model,
        resume,
        start_step,
        discretizer_fingerprint,
        out_dir,
        initialized_from,
    } = session;

    if config.batch_size == 0 {
        return Err(TrainError::BadConfig("batch_size must be positive".into()));
    }
    if start_step > config.steps {
        return Err(TrainError::BadConfig(format!(
            "start step {start_step} beyond configured total {}",
            config.steps
        )));
    }
    if model.config.vocab_sizes != table.vocab_sizes {
        return Err(TrainError::Checkpoint(CheckpointError::ConfigMismatch(
            format!(
                "model vocab {:?} disagrees with table vocab {:?}",
                model.config.vocab_sizes, table.vocab_sizes
            ),
        )));
    }
    if discretizer_fingerprint != table.discretizer_fingerprint {
        return Err(TrainError::Checkpoint(CheckpointError::ConfigMismatch(
            format!(
                "table tokenized with discretizer {} but session carries {}",
                table.discretizer_fingerprint, discretizer_fingerprint
            ),
        )));
    }

    let mut warnings = Vec::new();
    if phase == TrainPhase::Finetuned {
        let first = table.flows.first().map(|f| f.binary_label);
        if let Some(first) = first {
            if table.flows.iter().all(|f| f.binary_label == first) {
                let msg = format!(
                    "training labels are all {first}; classifier will degenerate to that class"
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }

    let mut adam = match resume {
        Some(snapshot) => Adam::from_snapshot(config.optim.clone(), snapshot),
        None => Adam::new(config.optim.clone(), &model.params),
    };

    let started = Instant::now();
    let mut loss_curve = Vec::with_capacity((config.steps - start_step) as usize);
    let seed = config.seed;

    for step in start_step..config.steps {
        let mut seg_rng = step_rng(seed, "segment", step);
        let mut drop_rng = step_rng(seed, "dropout", step);

        let batch = match phase {
            TrainPhase::Pretrained => {
                let mut mask_rng = step_rng(seed, "mask", step);
                let mut masked = Vec::with_capacity(config.batch_size);
                for _ in 0..config.batch_size {
                    let seq = sample_training_segment(table, config.seq_len, &mut seg_rng)?;
                    masked.push(apply_mlm_mask(
                        &seq,
                        config.mask_rate,
                        &mut mask_rng,
                        &table.vocab_sizes,
                    )?);
                }
                // A batch where the rate selected nothing (likely only at toy
                // batch and window sizes) would leave the loss undefined;
                // force-mask one real position so every step trains.
                if masked.iter().all(|m| m.mlm_mask.iter().all(|&x| !x)) {
                    let m = &mut masked[0];
                    if let Some(pos) = m.pad_mask.iter().position(|&real| real) {
                        m.mlm_mask[pos] = true;
                        m.inputs[pos] = [crate::token::MASK; crate::NUM_FEATURES];
                    }
                }
                collate_masked_batch(&masked, config.seq_len)?
            }
            TrainPhase::Finetuned => {
                let mut seqs = Vec::with_capacity(config.batch_size);
                for _ in 0..config.batch_size {
                    seqs.push(sample_training_segment(table, config.seq_len, &mut seg_rng)?);
                }
                collate_batch(&seqs, config.seq_len)?
            }
        };

        let mut fwd = model.forward(&batch, Some(&mut drop_rng))?;
        let loss_var = match phase {
            TrainPhase::Pretrained => model.mlm_loss(&mut fwd, &batch)?,
            TrainPhase::Finetuned => model.cls_loss(&mut fwd, &batch)?,
        };
        let loss = fwd.tape.scalar_value(loss_var);
        let grads = model.gradients(&fwd, loss_var)?;
        drop(fwd);
        let stats = adam.apply(&mut model.params, &grads);
        loss_curve.push(LossPoint { step, loss });

        if config.log_every > 0 && (step + 1) % config.log_every == 0 {
            log::info!(
                "{phase} step {}/{}: loss {loss:.4}, lr {:.2e}, grad norm {:.3}",
                step + 1,
                config.steps,
                stats.lr,
                stats.grad_norm
            );
        }

        if let Some(dir) = out_dir {
            let done = step + 1;
            if config.checkpoint_every > 0
                && done % config.checkpoint_every == 0
                && done < config.steps
            {
                let ckpt_dir = dir.join(format!("checkpoint-{done:07}"));
                checkpoint(&model, &adam, &discretizer_fingerprint, seed, phase, done)
                    .save(&ckpt_dir)?;
            }
        }
    }

    let final_checkpoint = match out_dir {
        Some(dir) => {
            let ckpt_dir = dir.join("final");
            checkpoint(
                &model,
                &adam,
                &discretizer_fingerprint,
                seed,
                phase,
                config.steps,
            )
            .save(&ckpt_dir)?;
            Some(ckpt_dir)
        }
        None => None,
    };

    let report = TrainReport {
        phase,
        seed,
        steps: config.steps,
        initialized_from,
        loss_curve,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        final_checkpoint,
        config: config.clone(),
        warnings,
    };
    if let Some(dir) = out_dir {
        write_report_files(dir, &report)?;
    }

    Ok(TrainOutcome {
        model,
        optimizer: adam.snapshot(),
        report,
    })
}

fn checkpoint<T: Scalar>(
    model: &FlowModel<T>,
    adam: &Adam<T>,
    discretizer_fingerprint: &str,
    seed: u64,
    phase: TrainPhase,
    step: u64,
) -> ModelCheckpoint<T> {
    ModelCheckpoint {
        config: model.config.clone(),
        params: model.params.clone(),
        discretizer_fingerprint: discretizer_fingerprint.to_string(),
        meta: TrainingMeta { step, seed, phase },
        optimizer: Some(adam.snapshot()),
    }
}

fn write_report_files(dir: &Path, report: &TrainReport) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    let report_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report)
        .expect("train report serializes");
    std::fs::write(&report_path, json).map_err(io_at(&report_path))?;

    let csv_path = dir.join("loss.csv");
    let mut csv = String::from("step,loss\n");
    for point in &report.loss_curve {
        csv.push_str(&format!("{},{}\n", point.step, point.loss));
    }
    std::fs::write(&csv_path, csv).map_err(io_at(&csv_path))?;
    Ok(())
}

/// Fraction of masked positions whose six ids are all predicted exactly, on
/// freshly drawn windows. The pretrain smoke tests use this as their
/// success metric.
pub fn masked_prediction_accuracy<T: Scalar>(
    model: &FlowModel<T>,
    table: &TokenizedTable,
    config: &TrainConfig,
    batches: usize,
) -> Result<f64, TrainError> {
    let mut hit = 0u64;
    let mut total = 0u64;
    for step in 0..batches as u64 {
        let mut seg_rng = step_rng(config.seed, "eval-segment", step);
        let mut mask_rng = step_rng(config.seed, "eval-mask", step);
        let mut masked = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let seq = sample_training_segment(table, config.seq_len, &mut seg_rng)?;
            masked.push(apply_mlm_mask(
                &seq,
                config.mask_rate,
                &mut mask_rng,
                &table.vocab_sizes,
            )?);
        }
        let batch = collate_masked_batch(&masked, config.seq_len)?;
        let mut fwd = model.forward(&batch, None)?;
        let logit_vars = model.mlm_logits(&mut fwd);
        let targets = batch.targets.as_ref().expect("masked batch has targets");
        let mlm_mask = batch.mlm_mask.as_ref().expect("masked batch has mask");
        let logits: Vec<_> = logit_vars
            .iter()
            .map(|&v| fwd.tape.value(v).clone())
            .collect();
        for b in 0..batch.batch_size() {
            for pos in 0..batch.seq_len {
                if !mlm_mask[[b, pos]] {
                    continue;
                }
                total += 1;
                let all_correct = (0..crate::NUM_FEATURES).all(|f| {
                    let vocab = table.vocab_sizes[f] as usize;
                    let row = &logits[f];
                    let mut best = 0usize;
                    let mut best_val = f64::NEG_INFINITY;
                    for c in 0..vocab {
                        let v = Scalar::as_f64(row[[b, pos, c]]);
                        if v > best_val {
                            best_val = v;
                            best = c;
                        }
                    }
                    best as u32 == targets[[b, pos, f]]
                });
                if all_correct {
                    hit += 1;
                }
            }
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(hit as f64 / total as f64)
}
