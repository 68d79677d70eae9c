//! Embeddings, transformer encoder and the two task heads.
//!
//! A flow's six token ids are embedded separately (E dims each), concatenated
//! into an H = 6E token vector, summed with a learned positional embedding,
//! and passed through N pre-norm transformer layers with a final layer norm.
//! The MLM head predicts each feature's original id at masked positions; the
//! classification head maps every real position to benign/malicious logits.

pub mod checkpoint;
pub mod params;

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{CheckpointError, ModelCheckpoint, TrainPhase, TrainingMeta};
pub use params::Parameters;

use crate::sequencer::Batch;
use crate::tensor::{Scalar, Tape, Var};
use crate::{token, FEATURE_NAMES, NUM_FEATURES};

/// Layer-norm variance floor.
const LN_EPS: f64 = 1e-12;

/// Architecture hyperparameters; every tensor shape derives from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width per feature (E).
    pub per_feature_dim: usize,
    /// Token vector width (H = 6·E).
    pub token_dim: usize,
    /// Encoder depth (N); zero collapses the encoder to a layer norm.
    pub layers: usize,
    /// Attention heads (A); must divide `token_dim`.
    pub heads: usize,
    /// Feed-forward inner width (F).
    pub ffn_dim: usize,
    /// Positional table length; batches may not exceed it.
    pub max_seq_len: usize,
    /// Dropout rate, active only when a dropout RNG is supplied.
    pub dropout: f64,
    /// Per-feature vocabulary sizes, reserved ids included.
    pub vocab_sizes: [u32; 6],
}

impl ModelConfig {
    /// Published defaults (E=128, H=768, N=2, A=12, F=1536, L_max=64,
    /// dropout 0.1) around the given vocabularies.
    pub fn with_vocab(vocab_sizes: [u32; 6]) -> Self {
        ModelConfig {
            per_feature_dim: 128,
            token_dim: 768,
            layers: 2,
            heads: 12,
            ffn_dim: 1536,
            max_seq_len: 64,
            dropout: 0.1,
            vocab_sizes,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.token_dim != NUM_FEATURES * self.per_feature_dim {
            return Err(ModelError::BadConfig(format!(
                "token_dim {} must equal 6 * per_feature_dim {}",
                self.token_dim, self.per_feature_dim
            )));
        }
        if self.heads == 0 || !self.token_dim.is_multiple_of(self.heads) {
            return Err(ModelError::BadConfig(format!(
                "token_dim {} must be divisible by heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(ModelError::BadConfig("max_seq_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        for (f, &v) in self.vocab_sizes.iter().enumerate() {
            if v <= token::FIRST_DATA {
                return Err(ModelError::BadConfig(format!(
                    "vocab for {} is {v}, leaving no data ids",
                    FEATURE_NAMES[f]
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.heads
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("token id {id} out of range for feature {feature} (vocab size {vocab})")]
    IdOutOfRange {
        feature: &'static str,
        id: u32,
        vocab: u32,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("MLM loss requires at least one masked position")]
    NoMaskedPositions,
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
}

/// One recorded forward pass: the tape, the encoder output, and the leaf
/// variables of every parameter in canonical order.
pub struct Forward<T: Scalar> {
    pub tape: Tape<T>,
    /// Encoder output [B, L, H].
    pub hidden: Var,
    /// Embedding output after positional addition, before dropout [B, L, H].
    pub embedded: Var,
    /// Per-layer attention probabilities [B*A, L, L], recorded for
    /// inspection.
    pub attention_probs: Vec<ArrayD<T>>,
    pub batch_size: usize,
    pub seq_len: usize,
    param_vars: Vec<Var>,
    pad_flat: Arc<Vec<bool>>,
}

impl<T: Scalar> Forward<T> {
    pub fn hidden_values(&self) -> &ArrayD<T> {
        self.tape.value(self.hidden)
    }
}

/// The model: config plus parameters. Forward passes borrow the model
/// immutably; updates go through [`Parameters`] between passes.
#[derive(Debug, Clone)]
pub struct FlowModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
}

impl<T: Scalar> FlowModel<T> {
    /// Fresh model with deterministic initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = Parameters::init(&config, seed);
        Ok(FlowModel { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Parameters<T>) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(FlowModel { config, params })
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.seq_len > self.config.max_seq_len {
            return Err(ModelError::ShapeMismatch(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq_len, self.config.max_seq_len
            )));
        }
        for (f, &name) in FEATURE_NAMES.iter().enumerate() {
            let vocab = self.config.vocab_sizes[f];
            for &id in batch.inputs.slice(ndarray::s![.., .., f]).iter() {
                if id >= vocab {
                    return Err(ModelError::IdOutOfRange {
                        feature: name,
                        id,
                        vocab,
                    });
                }
            }
        }
        Ok(())
    }

    /// Run the embedding stack and encoder, recording every op. Dropout is
    /// applied only when `dropout_rng` is given and the configured rate is
    /// positive; evaluation passes `None` and is fully deterministic.
    pub fn forward(
        &self,
        batch: &Batch,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward<T>, ModelError> {
        self.check_batch(batch)?;
        let bsz = batch.batch_size();
        let l = batch.seq_len;
        let heads = self.config.heads;

        let mut tape = Tape::<T>::new();
        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        let pv = |name: &str| param_vars[self.index_of(name)];

        let pad_flat: Arc<Vec<bool>> = Arc::new(batch.pad_mask.iter().copied().collect());

        // Embed each feature and concatenate along the hidden axis.
        let mut parts = Vec::with_capacity(NUM_FEATURES);
        for (f, feat) in FEATURE_NAMES.iter().enumerate() {
            let ids: Arc<Vec<usize>> = Arc::new(
                batch
                    .inputs
                    .slice(ndarray::s![.., .., f])
                    .iter()
                    .map(|&id| id as usize)
                    .collect(),
            );
            parts.push(tape.embedding_gather(pv(&format!("embed/{feat}")), ids, bsz, l));
        }
        let concat = tape.concat_last(&parts);
        let embedded = tape.add_positional(concat, pv("positional"));

        let mut x = self.maybe_dropout(&mut tape, embedded, &mut dropout_rng);

        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mut attention_probs = Vec::with_capacity(self.config.layers);
        for layer in 0..self.config.layers {
            let p = format!("layer{layer}");
            let normed = tape.layer_norm(x, pv(&format!("{p}/ln1/gain")), pv(&format!("{p}/ln1/bias")), LN_EPS);
            let q = tape.linear(normed, pv(&format!("{p}/attn/q/w")), pv(&format!("{p}/attn/q/b")));
            let k = tape.linear(normed, pv(&format!("{p}/attn/k/w")), pv(&format!("{p}/attn/k/b")));
            let v = tape.linear(normed, pv(&format!("{p}/attn/v/w")), pv(&format!("{p}/attn/v/b")));
            let qh = tape.split_heads(q, heads);
            let kh = tape.split_heads(k, heads);
            let vh = tape.split_heads(v, heads);
            let scores = tape.batch_matmul(qh, kh, true);
            let scaled = tape.scale(scores, scale);
            let probs = tape.masked_softmax(scaled, Arc::clone(&pad_flat), heads);
            attention_probs.push(tape.value(probs).clone());
            let ctx = tape.batch_matmul(probs, vh, false);
            let merged = tape.merge_heads(ctx, heads);
            let projected = tape.linear(merged, pv(&format!("{p}/attn/o/w")), pv(&format!("{p}/attn/o/b")));
            let projected = self.maybe_dropout(&mut tape, projected, &mut dropout_rng);
            x = tape.add(x, projected);

            let normed2 = tape.layer_norm(x, pv(&format!("{p}/ln2/gain")), pv(&format!("{p}/ln2/bias")), LN_EPS);
            let inner = tape.linear(normed2, pv(&format!("{p}/ffn/w1")), pv(&format!("{p}/ffn/b1")));
            let act = tape.gelu(inner);
            let outer = tape.linear(act, pv(&format!("{p}/ffn/w2")), pv(&format!("{p}/ffn/b2")));
            let outer = self.maybe_dropout(&mut tape, outer, &mut dropout_rng);
            x = tape.add(x, outer);
        }
        let hidden = tape.layer_norm(x, pv("final_ln/gain"), pv("final_ln/bias"), LN_EPS);

        Ok(Forward {
            tape,
            hidden,
            embedded,
            attention_probs,
            batch_size: bsz,
            seq_len: l,
            param_vars,
            pad_flat,
        })
    }

    fn index_of(&self, name: &str) -> usize {
        self.params.index_of(name)
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Var {
        let rate = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let mask = ArrayD::from_shape_simple_fn(tape.value(x).raw_dim(), || {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep_scale
            }
        });
        tape.mul_const(x, Arc::new(mask))
    }

    /// Shared MLM trunk (linear, GELU, layer norm) applied to any [.., H]
    /// tensor.
    fn mlm_trunk(&self, fwd: &mut Forward<T>, input: Var) -> Var {
        let h = self.config.token_dim;
        let pv = |f: &Forward<T>, name: &str| f.param_vars[self.index_of(name)];
        let w = pv(fwd, "mlm/trunk/w");
        let zero = fwd.tape.leaf(ArrayD::zeros(IxDyn(&[h])));
        let lin = fwd.tape.linear(input, w, zero);
        let act = fwd.tape.gelu(lin);
        let gain = pv(fwd, "mlm/trunk_ln/gain");
        let bias = pv(fwd, "mlm/trunk_ln/bias");
        fwd.tape.layer_norm(act, gain, bias, LN_EPS)
    }

    /// Full-shape MLM logits, one [B, L, vocab_f] tensor per feature.
    pub fn mlm_logits(&self, fwd: &mut Forward<T>) -> [Var; NUM_FEATURES] {
        let trunk = self.mlm_trunk(fwd, fwd.hidden);
        std::array::from_fn(|f| {
            let w = fwd.param_vars[self.index_of(&format!("mlm/out/{}", FEATURE_NAMES[f]))];
            let vocab = self.config.vocab_sizes[f] as usize;
            let zero = fwd.tape.leaf(ArrayD::zeros(IxDyn(&[vocab])));
            fwd.tape.linear(trunk, w, zero)
        })
    }

    /// Full-shape classification logits [B, L, 2]; index 0 is benign.
    pub fn cls_logits(&self, fwd: &mut Forward<T>) -> Var {
        let w = fwd.param_vars[self.index_of("cls/w")];
        let b = fwd.param_vars[self.index_of("cls/b")];
        fwd.tape.linear(fwd.hidden, w, b)
    }

    /// Masked-language-model loss: mean over selected positions of the sum
    /// over features of cross-entropy against the original ids. Only rows
    /// picked by the batch's `mlm_mask` enter the computation.
    pub fn mlm_loss(&self, fwd: &mut Forward<T>, batch: &Batch) -> Result<Var, ModelError> {
        let targets = batch.targets.as_ref().ok_or_else(|| {
            ModelError::ShapeMismatch("batch carries no MLM targets".into())
        })?;
        let mlm_mask = batch.mlm_mask.as_ref().ok_or_else(|| {
            ModelError::ShapeMismatch("batch carries no MLM mask".into())
        })?;
        let l = fwd.seq_len;
        let mut rows = Vec::new();
        for b in 0..fwd.batch_size {
            for pos in 0..l {
                if mlm_mask[[b, pos]] {
                    rows.push(b * l + pos);
                }
            }
        }
        if rows.is_empty() {
            return Err(ModelError::NoMaskedPositions);
        }
        let rows = Arc::new(rows);
        let selected = fwd.tape.gather_rows(fwd.hidden, Arc::clone(&rows));
        let trunk = self.mlm_trunk(fwd, selected);
        let inv_count = 1.0 / rows.len() as f64;
        let mut total: Option<Var> = None;
        for (f, feat) in FEATURE_NAMES.iter().enumerate() {
            let w = fwd.param_vars[self.index_of(&format!("mlm/out/{feat}"))];
            let vocab = self.config.vocab_sizes[f] as usize;
            let zero = fwd.tape.leaf(ArrayD::zeros(IxDyn(&[vocab])));
            let logits = fwd.tape.linear(trunk, w, zero);
            let tgt: Vec<usize> = rows
                .iter()
                .map(|&r| targets[[r / l, r % l, f]] as usize)
                .collect();
            let loss_f = fwd.tape.softmax_xent(logits, Arc::new(tgt), inv_count);
            total = Some(match total {
                None => loss_f,
                Some(acc) => fwd.tape.add(acc, loss_f),
            });
        }
        Ok(total.expect("six features"))
    }

    /// Classification loss: mean cross-entropy over real (non-pad)
    /// positions against the per-flow binary labels.
    pub fn cls_loss(&self, fwd: &mut Forward<T>, batch: &Batch) -> Result<Var, ModelError> {
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| ModelError::ShapeMismatch("batch carries no labels".into()))?;
        let l = fwd.seq_len;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for b in 0..fwd.batch_size {
            for pos in 0..l {
                if fwd.pad_flat[b * l + pos] {
                    rows.push(b * l + pos);
                    targets.push(labels[[b, pos]] as usize);
                }
            }
        }
        if rows.is_empty() {
            return Err(ModelError::ShapeMismatch(
                "batch has no real positions to classify".into(),
            ));
        }
        let count = rows.len();
        let selected = fwd.tape.gather_rows(fwd.hidden, Arc::new(rows));
        let w = fwd.param_vars[self.index_of("cls/w")];
        let bias = fwd.param_vars[self.index_of("cls/b")];
        let logits = fwd.tape.linear(selected, w, bias);
        Ok(fwd
            .tape
            .softmax_xent(logits, Arc::new(targets), 1.0 / count as f64))
    }

    /// Run backward from `loss` and return one gradient per parameter in
    /// canonical order; parameters outside the graph get zero gradients.
    pub fn gradients(
        &self,
        fwd: &Forward<T>,
        loss: Var,
    ) -> Result<Vec<ArrayD<T>>, ModelError> {
        let all = fwd.tape.backward(loss);
        let mut out = Vec::with_capacity(fwd.param_vars.len());
        for (idx, var) in fwd.param_vars.iter().enumerate() {
            let grad = all[var.index()].clone().unwrap_or_else(|| {
                ArrayD::zeros(fwd.tape.value(*var).raw_dim())
            });
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(ModelError::NonFiniteGradient(
                    self.params.name_at(idx).to_string(),
                ));
            }
            out.push(grad);
        }
        Ok(out)
    }

    /// Benign/malicious probabilities for every position of the batch,
    /// computed without dropout. Pad positions carry values but callers
    /// must ignore them.
    pub fn predict_probs(&self, batch: &Batch) -> Result<Array3<f64>, ModelError> {
        let mut fwd = self.forward(batch, None)?;
        let logits = self.cls_logits(&mut fwd);
        let lv = fwd.tape.value(logits);
        let mut probs = Array3::<f64>::zeros((batch.batch_size(), batch.seq_len, 2));
        for b in 0..batch.batch_size() {
            for pos in 0..batch.seq_len {
                let z0 = Scalar::as_f64(lv[[b, pos, 0]]);
                let z1 = Scalar::as_f64(lv[[b, pos, 1]]);
                let m = z0.max(z1);
                let e0 = (z0 - m).exp();
                let e1 = (z1 - m).exp();
                probs[[b, pos, 0]] = e0 / (e0 + e1);
                probs[[b, pos, 1]] = e1 / (e0 + e1);
            }
        }
        Ok(probs)
    }
}

/// Softmax over the last axis of a full-shape logit tensor, for tests and
/// inspection.
pub fn softmax_rows<T: Scalar>(logits: &ArrayD<T>) -> ArrayD<f64> {
    let v = *logits.shape().last().expect("logits have a last axis");
    let rows = logits.len() / v;
    let mut out = ArrayD::<f64>::zeros(logits.raw_dim());
    {
        let src = logits
            .view()
            .into_shape_with_order((rows, v))
            .expect("contiguous");
        let mut dst = out
            .view_mut()
            .into_shape_with_order((rows, v))
            .expect("contiguous");
        for (srow, mut drow) in src.rows().into_iter().zip(dst.rows_mut()) {
            let m = srow
                .iter()
                .map(|x| Scalar::as_f64(*x))
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (s, d) in srow.iter().zip(drow.iter_mut()) {
                *d = (Scalar::as_f64(*s) - m).exp();
                sum += *d;
            }
            for d in drow.iter_mut() {
                *d /= sum;
            }
        }
    }
    out
}

/// Helper shared by trainer and tests: a labeled batch from raw pieces.
pub fn batch_from_ids(
    ids: &[Vec<[u32; 6]>],
    pad: &[Vec<bool>],
    labels: Option<&[Vec<u8>]>,
) -> Batch {
    let bsz = ids.len();
    let l = ids.first().map_or(0, Vec::len);
    let mut inputs = Array3::<u32>::zeros((bsz, l, 6));
    let mut pad_mask = Array2::<bool>::from_elem((bsz, l), false);
    for (b, row) in ids.iter().enumerate() {
        for (pos, flow) in row.iter().enumerate() {
            for f in 0..6 {
                inputs[[b, pos, f]] = flow[f];
            }
            pad_mask[[b, pos]] = pad[b][pos];
        }
    }
    let labels = labels.map(|ls| {
        let mut arr = Array2::<u8>::zeros((bsz, l));
        for (b, row) in ls.iter().enumerate() {
            for (pos, &v) in row.iter().enumerate() {
                arr[[b, pos]] = v;
            }
        }
        arr
    });
    Batch {
        seq_len: l,
        inputs,
        pad_mask,
        labels,
        targets: None,
        mlm_mask: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    fn tiny(vocab: [u32; 6]) -> ModelConfig {
        ModelConfig {
            per_feature_dim: 4,
            token_dim: 24,
            layers: 1,
            heads: 2,
            ffn_dim: 48,
            max_seq_len: 8,
            dropout: 0.0,
            vocab_sizes: vocab,
        }
    }

    fn all_real(bsz: usize, l: usize) -> Vec<Vec<bool>> {
        vec![vec![true; l]; bsz]
    }

    /// Batch whose six id streams cycle through the data range of a [7; 6]
    /// vocabulary.
    fn cycling_batch(bsz: usize, l: usize) -> Batch {
        let ids = (0..bsz)
            .map(|b| {
                (0..l)
                    .map(|pos| std::array::from_fn(|f| 3 + ((b + pos + f) % 4) as u32))
                    .collect()
            })
            .collect::<Vec<Vec<[u32; 6]>>>();
        let labels: Vec<Vec<u8>> = (0..bsz)
            .map(|b| (0..l).map(|pos| ((b + pos) % 2) as u8).collect())
            .collect();
        batch_from_ids(&ids, &all_real(bsz, l), Some(&labels))
    }

    /// Turn a plain batch into an MLM batch: targets are the current ids and
    /// the given positions are marked for loss.
    fn with_mask(mut batch: Batch, masked: &[(usize, usize)]) -> Batch {
        batch.targets = Some(batch.inputs.clone());
        let mut mask = Array2::from_elem(
            (batch.batch_size(), batch.seq_len),
            false,
        );
        for &(b, pos) in masked {
            mask[[b, pos]] = true;
        }
        batch.mlm_mask = Some(mask);
        batch.labels = None;
        batch
    }

    #[test]
    fn published_defaults_give_768_wide_hidden_states() {
        let config = ModelConfig::with_vocab([10; 6]);
        let model = FlowModel::<f32>::new(config, 0).unwrap();
        let batch = cycling_batch(2, 4);
        let fwd = model.forward(&batch, None).unwrap();
        assert_eq!(fwd.hidden_values().shape(), &[2, 4, 768]);
    }

    #[test]
    fn identical_ids_embed_identically_until_positions_differ() {
        let mut model = FlowModel::<f64>::new(tiny([7; 6]), 3).unwrap();
        let ids = vec![vec![[4u32, 5, 3, 6, 4, 5]; 3]; 1];
        let batch = batch_from_ids(&ids, &all_real(1, 3), None);

        // With the positional table intact the rows differ...
        let fwd = model.forward(&batch, None).unwrap();
        let emb = fwd.tape.value(fwd.embedded).clone();
        let row = |a: &ArrayD<f64>, pos: usize| {
            a.index_axis(Axis(0), 0)
                .index_axis(Axis(0), pos)
                .to_owned()
        };
        assert!(row(&emb, 0)
            .iter()
            .zip(row(&emb, 1).iter())
            .any(|(a, b)| (a - b).abs() > 1e-9));

        // ...and collapse once the positional table is zeroed, leaving the
        // pure per-id embedding.
        model.params.get_mut("positional").fill(0.0);
        let fwd = model.forward(&batch, None).unwrap();
        let emb = fwd.tape.value(fwd.embedded).clone();
        for pos in 1..3 {
            let (a, b) = (row(&emb, 0), row(&emb, pos));
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_embeddings_leave_only_the_positional_signal() {
        let mut model = FlowModel::<f64>::new(tiny([7; 6]), 4).unwrap();
        for feat in FEATURE_NAMES {
            model.params.get_mut(&format!("embed/{feat}")).fill(0.0);
        }
        let batch = cycling_batch(2, 4);
        let fwd = model.forward(&batch, None).unwrap();
        let emb = fwd.tape.value(fwd.embedded);
        let positional = model.params.get("positional");
        for b in 0..2 {
            for pos in 0..4 {
                for h in 0..24 {
                    assert!((emb[[b, pos, h]] - positional[[pos, h]]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions_that_ignore_pads() {
        let model = FlowModel::<f64>::new(tiny([7; 6]), 5).unwrap();
        let ids = vec![vec![[3u32; 6], [4; 6], [5; 6], [0; 6]]; 1];
        let pad = vec![vec![true, true, true, false]];
        let batch = batch_from_ids(&ids, &pad, None);
        let fwd = model.forward(&batch, None).unwrap();
        let probs = &fwd.attention_probs[0]; // [B*A, L, L]
        assert_eq!(probs.shape(), &[2, 4, 4]);
        for head in 0..2 {
            for q in 0..3 {
                let row_sum: f64 = (0..4).map(|k| probs[[head, q, k]]).sum();
                assert!((row_sum - 1.0).abs() < 1e-12, "row sums to {row_sum}");
                assert_eq!(probs[[head, q, 3]], 0.0, "mass leaked onto the pad key");
            }
        }
    }

    #[test]
    fn pad_positions_do_not_perturb_real_outputs() {
        let model = FlowModel::<f64>::new(tiny([7; 6]), 6).unwrap();
        let ids3 = vec![vec![[3u32, 4, 5, 6, 3, 4], [5; 6], [6, 3, 4, 5, 6, 3]]];
        let short = batch_from_ids(&ids3, &all_real(1, 3), None);
        let mut ids5 = ids3.clone();
        ids5[0].push([0; 6]);
        ids5[0].push([0; 6]);
        let padded = batch_from_ids(&ids5, &[vec![true, true, true, false, false]], None);

        let h_short = model.forward(&short, None).unwrap().hidden_values().clone();
        let h_padded = model.forward(&padded, None).unwrap().hidden_values().clone();
        for pos in 0..3 {
            for h in 0..24 {
                let d = (h_short[[0, pos, h]] - h_padded[[0, pos, h]]).abs();
                assert!(d < 1e-9, "position {pos} dim {h} drifted by {d}");
            }
        }
    }

    #[test]
    fn zero_layers_reduce_to_layer_norm_of_embeddings() {
        let mut config = tiny([7; 6]);
        config.layers = 0;
        let model = FlowModel::<f64>::new(config, 7).unwrap();
        let batch = cycling_batch(1, 4);
        let fwd = model.forward(&batch, None).unwrap();
        let emb = fwd.tape.value(fwd.embedded).clone();
        let hidden = fwd.hidden_values();
        // final_ln initializes to gain one, bias zero, so the expected output
        // is plain per-row standardization.
        for pos in 0..4 {
            let row: Vec<f64> = (0..24).map(|h| emb[[0, pos, h]]).collect();
            let mean = row.iter().sum::<f64>() / 24.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 24.0;
            for (h, x) in row.iter().enumerate() {
                let want = (x - mean) / (var + LN_EPS).sqrt();
                assert!((hidden[[0, pos, h]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logit_tensors_have_per_feature_vocab_shapes() {
        let vocab = [7, 8, 9, 10, 11, 12];
        let model = FlowModel::<f64>::new(tiny(vocab), 8).unwrap();
        let batch = cycling_batch(2, 3);
        let mut fwd = model.forward(&batch, None).unwrap();
        let mlm = model.mlm_logits(&mut fwd);
        for (f, &v) in vocab.iter().enumerate() {
            assert_eq!(fwd.tape.value(mlm[f]).shape(), &[2, 3, v as usize]);
        }
        let cls = model.cls_logits(&mut fwd);
        assert_eq!(fwd.tape.value(cls).shape(), &[2, 3, 2]);
    }

    #[test]
    fn zeroed_heads_give_uniform_probabilities_and_canonical_losses() {
        let vocab = [7u32, 8, 9, 10, 11, 12];
        let mut model = FlowModel::<f64>::new(tiny(vocab), 9).unwrap();
        for feat in FEATURE_NAMES {
            model.params.get_mut(&format!("mlm/out/{feat}")).fill(0.0);
        }
        model.params.get_mut("cls/w").fill(0.0);
        model.params.get_mut("cls/b").fill(0.0);

        let batch = cycling_batch(2, 4);
        let mut fwd = model.forward(&batch, None).unwrap();
        let mlm = model.mlm_logits(&mut fwd);
        for (f, &v) in vocab.iter().enumerate() {
            let probs = softmax_rows(fwd.tape.value(mlm[f]));
            for p in probs.iter() {
                assert!((p - 1.0 / v as f64).abs() < 1e-12);
            }
        }
        let probs = model.predict_probs(&batch).unwrap();
        for p in probs.iter() {
            assert!((p - 0.5).abs() < 1e-12);
        }

        // Uniform predictions pin both losses at their entropy floors.
        let masked = with_mask(cycling_batch(2, 4), &[(0, 1), (1, 2), (1, 3)]);
        let mut fwd = model.forward(&masked, None).unwrap();
        let mlm_loss = model.mlm_loss(&mut fwd, &masked).unwrap();
        let want: f64 = vocab.iter().map(|&v| (v as f64).ln()).sum();
        assert!((fwd.tape.scalar_value(mlm_loss) - want).abs() < 1e-9);

        let batch = cycling_batch(2, 4);
        let mut fwd = model.forward(&batch, None).unwrap();
        let cls_loss = model.cls_loss(&mut fwd, &batch).unwrap();
        assert!((fwd.tape.scalar_value(cls_loss) - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn duplicated_rows_leave_mean_losses_unchanged() {
        let model = FlowModel::<f64>::new(tiny([7; 6]), 10).unwrap();
        let one = with_mask(cycling_batch(1, 4), &[(0, 0), (0, 2)]);
        let mut two = with_mask(cycling_batch(1, 4), &[(0, 0), (0, 2)]);
        // Duplicate the single row along the batch axis.
        two.inputs = ndarray::concatenate(
            Axis(0),
            &[two.inputs.view(), two.inputs.view()],
        )
        .unwrap();
        two.pad_mask = ndarray::concatenate(
            Axis(0),
            &[two.pad_mask.view(), two.pad_mask.view()],
        )
        .unwrap();
        two.targets = Some(two.inputs.clone());
        let mask = two.mlm_mask.take().unwrap();
        two.mlm_mask = Some(
            ndarray::concatenate(Axis(0), &[mask.view(), mask.view()]).unwrap(),
        );

        let mut f1 = model.forward(&one, None).unwrap();
        let l1 = model.mlm_loss(&mut f1, &one).unwrap();
        let mut f2 = model.forward(&two, None).unwrap();
        let l2 = model.mlm_loss(&mut f2, &two).unwrap();
        assert!(
            (f1.tape.scalar_value(l1) - f2.tape.scalar_value(l2)).abs() < 1e-9
        );

        let one = cycling_batch(1, 4);
        let mut two = cycling_batch(1, 4);
        two.inputs = ndarray::concatenate(
            Axis(0),
            &[two.inputs.view(), two.inputs.view()],
        )
        .unwrap();
        two.pad_mask = ndarray::concatenate(
            Axis(0),
            &[two.pad_mask.view(), two.pad_mask.view()],
        )
        .unwrap();
        let labels = two.labels.take().unwrap();
        two.labels = Some(
            ndarray::concatenate(Axis(0), &[labels.view(), labels.view()]).unwrap(),
        );
        let mut f1 = model.forward(&one, None).unwrap();
        let l1 = model.cls_loss(&mut f1, &one).unwrap();
        let mut f2 = model.forward(&two, None).unwrap();
        let l2 = model.cls_loss(&mut f2, &two).unwrap();
        assert!(
            (f1.tape.scalar_value(l1) - f2.tape.scalar_value(l2)).abs() < 1e-9
        );
    }

    #[test]
    fn labels_under_pads_cannot_move_cls_loss() {
        let model = FlowModel::<f64>::new(tiny([7; 6]), 11).unwrap();
        let ids = vec![vec![[3u32; 6], [4; 6], [0; 6], [0; 6]]];
        let pad = vec![vec![true, true, false, false]];
        let a = batch_from_ids(&ids, &pad, Some(&[vec![0, 1, 0, 0]]));
        let b = batch_from_ids(&ids, &pad, Some(&[vec![0, 1, 1, 1]]));
        let mut fa = model.forward(&a, None).unwrap();
        let la = model.cls_loss(&mut fa, &a).unwrap();
        let mut fb = model.forward(&b, None).unwrap();
        let lb = model.cls_loss(&mut fb, &b).unwrap();
        assert_eq!(fa.tape.scalar_value(la), fb.tape.scalar_value(lb));
    }

    #[test]
    fn error_paths_are_reported_precisely() {
        let model = FlowModel::<f64>::new(tiny([7; 6]), 12).unwrap();

        let long = cycling_batch(1, 9); // max_seq_len is 8
        assert!(matches!(
            model.forward(&long, None),
            Err(ModelError::ShapeMismatch(_))
        ));

        let mut bad = cycling_batch(1, 4);
        bad.inputs[[0, 2, 3]] = 7; // vocab size is 7, so id 7 is out of range
        match model.forward(&bad, None).map(|_| ()).unwrap_err() {
            ModelError::IdOutOfRange { feature, id, vocab } => {
                assert_eq!(feature, FEATURE_NAMES[3]);
                assert_eq!((id, vocab), (7, 7));
            }
            other => panic!("expected IdOutOfRange, got {other:?}"),
        }

        let unmasked = with_mask(cycling_batch(1, 4), &[]);
        let mut fwd = model.forward(&unmasked, None).unwrap();
        assert!(matches!(
            model.mlm_loss(&mut fwd, &unmasked),
            Err(ModelError::NoMaskedPositions)
        ));

        let plain = cycling_batch(1, 4);
        let mut fwd = model.forward(&plain, None).unwrap();
        assert!(matches!(
            model.mlm_loss(&mut fwd, &plain),
            Err(ModelError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn unused_embedding_rows_receive_zero_gradient() {
        let model = FlowModel::<f64>::new(tiny([7; 6]), 13).unwrap();
        // Only ids 3 and 4 ever appear.
        let ids = vec![vec![[3u32; 6], [4; 6], [3; 6], [4; 6]]];
        let batch = with_mask(
            batch_from_ids(&ids, &all_real(1, 4), None),
            &[(0, 1), (0, 3)],
        );
        let mut fwd = model.forward(&batch, None).unwrap();
        let loss = model.mlm_loss(&mut fwd, &batch).unwrap();
        let grads = model.gradients(&fwd, loss).unwrap();
        let idx = model.params.index_of("embed/src_port");
        let g = &grads[idx];
        assert_eq!(g.shape(), &[7, 4]);
        for row in [0usize, 1, 2, 5, 6] {
            for h in 0..4 {
                assert_eq!(g[[row, h]], 0.0, "untouched row {row} got gradient");
            }
        }
        let touched: f64 = (0..4).map(|h| g[[3, h]].abs() + g[[4, h]].abs()).sum();
        assert!(touched > 0.0, "used rows received no gradient at all");
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let a = FlowModel::<f32>::new(tiny([7; 6]), 99).unwrap();
        let b = FlowModel::<f32>::new(tiny([7; 6]), 99).unwrap();
        let c = FlowModel::<f32>::new(tiny([7; 6]), 100).unwrap();
        for (name, t) in a.params.iter() {
            assert_eq!(t, b.params.get(name), "tensor {name} differs across runs");
        }
        assert!(FEATURE_NAMES
            .iter()
            .any(|f| a.params.get(&format!("embed/{f}")) != c.params.get(&format!("embed/{f}"))));
    }
}
