//! Flow "sentences": contiguous windows of tokenized flows, MLM corruption,
//! and dense batch collation.
//!
//! Windows are always verbatim slices of the source table; randomness enters
//! only through the segment start index and the masking draws. Short windows
//! are padded at the tail with PAD ids and excluded from attention and loss
//! via the pad mask.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::discretizer::TokenizedTable;
use crate::ingest::BinaryLabel;
use crate::token;
use crate::NUM_FEATURES;

/// A fixed-length window of flows. Real positions form a prefix; the tail
/// (if any) is padding.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSequence {
    /// Token ids per position, PAD at padding positions.
    pub ids: Vec<[u32; NUM_FEATURES]>,
    /// true = real flow, false = padding.
    pub pad_mask: Vec<bool>,
    /// Per-position labels; meaningful only where `pad_mask` is true.
    pub labels: Vec<BinaryLabel>,
    /// Source order indices; meaningful only where `pad_mask` is true.
    pub order_index: Vec<u64>,
}

impl FlowSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }
}

/// A sequence after MLM corruption. `targets` always holds the original ids;
/// `inputs` differs from them only at positions selected for the MLM loss
/// that drew the mask or random-replacement branch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub inputs: Vec<[u32; NUM_FEATURES]>,
    pub targets: Vec<[u32; NUM_FEATURES]>,
    /// true = position selected for the MLM loss.
    pub mlm_mask: Vec<bool>,
    pub pad_mask: Vec<bool>,
}

/// Dense arrays for one training/eval batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub seq_len: usize,
    /// [batch, seq_len, 6]
    pub inputs: Array3<u32>,
    /// [batch, seq_len]; true = real flow.
    pub pad_mask: Array2<bool>,
    /// Class indices at real positions (plain batches only).
    pub labels: Option<Array2<u8>>,
    /// Original ids (masked batches only).
    pub targets: Option<Array3<u32>>,
    /// MLM selection (masked batches only).
    pub mlm_mask: Option<Array2<bool>>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.inputs.shape()[0]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SequencerError {
    #[error("cannot sample a segment from an empty table")]
    EmptyTable,
    #[error("sequence length must be >= 1")]
    BadLength,
    #[error("mask rate must be in (0, 1), got {0}")]
    BadMaskRate(f64),
    #[error("ragged batch: expected sequence length {expected}, found {found}")]
    RaggedBatch { expected: usize, found: usize },
}

fn pad_tail(seq: &mut FlowSequence, len: usize) {
    while seq.ids.len() < len {
        seq.ids.push([token::PAD; NUM_FEATURES]);
        seq.pad_mask.push(false);
        seq.labels.push(BinaryLabel::Benign);
        seq.order_index.push(0);
    }
}

fn window(table: &TokenizedTable, start: usize, len: usize) -> FlowSequence {
    let end = (start + len).min(table.flows.len());
    let mut seq = FlowSequence {
        ids: Vec::with_capacity(len),
        pad_mask: Vec::with_capacity(len),
        labels: Vec::with_capacity(len),
        order_index: Vec::with_capacity(len),
    };
    for flow in &table.flows[start..end] {
        seq.ids.push(flow.ids);
        seq.pad_mask.push(true);
        seq.labels.push(flow.binary_label);
        seq.order_index.push(flow.order_index);
    }
    pad_tail(&mut seq, len);
    seq
}

/// Draw one training segment: a uniformly random start over
/// `{0, ..., max(0, N - len)}`, then the table slice verbatim. Tables shorter
/// than `len` yield one padded window.
pub fn sample_training_segment<R: Rng>(
    table: &TokenizedTable,
    len: usize,
    rng: &mut R,
) -> Result<FlowSequence, SequencerError> {
    if table.is_empty() {
        return Err(SequencerError::EmptyTable);
    }
    if len == 0 {
        return Err(SequencerError::BadLength);
    }
    let max_start = table.flows.len().saturating_sub(len);
    let start = rng.random_range(0..=max_start);
    Ok(window(table, start, len))
}

/// Non-overlapping eval windows `[0,L), [L,2L), ...`; the final partial
/// window is padded. Every flow appears in exactly one window.
pub fn segment_for_eval(
    table: &TokenizedTable,
    len: usize,
) -> Result<Vec<FlowSequence>, SequencerError> {
    if len == 0 {
        return Err(SequencerError::BadLength);
    }
    let mut out = Vec::with_capacity(table.flows.len().div_ceil(len));
    let mut start = 0;
    while start < table.flows.len() {
        out.push(window(table, start, len));
        start += len;
    }
    Ok(out)
}

/// Corrupt a sequence for the MLM objective.
///
/// Each real position is independently selected with probability `rate`.
/// A selected position keeps its original ids in `targets` and, in `inputs`:
/// with probability 0.8 all six ids become MASK, with probability 0.1 each id
/// is redrawn uniformly from its feature's data-id range, and with
/// probability 0.1 it is left unchanged. Pad positions are never selected.
pub fn apply_mlm_mask<R: Rng>(
    seq: &FlowSequence,
    rate: f64,
    rng: &mut R,
    vocab_sizes: &[u32; NUM_FEATURES],
) -> Result<MaskedSequence, SequencerError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(SequencerError::BadMaskRate(rate));
    }
    let mut inputs = seq.ids.clone();
    let targets = seq.ids.clone();
    let mut mlm_mask = vec![false; seq.len()];
    for (pos, &real) in seq.pad_mask.iter().enumerate() {
        if !real || rng.random::<f64>() >= rate {
            continue;
        }
        mlm_mask[pos] = true;
        let branch: f64 = rng.random();
        if branch < 0.8 {
            inputs[pos] = [token::MASK; NUM_FEATURES];
        } else if branch < 0.9 {
            for (f, id) in inputs[pos].iter_mut().enumerate() {
                let data_ids = vocab_sizes[f].saturating_sub(token::FIRST_DATA);
                if data_ids > 0 {
                    *id = token::FIRST_DATA + rng.random_range(0..data_ids);
                }
            }
        }
        // else: keep the original ids; the position still counts for the loss.
    }
    Ok(MaskedSequence {
        inputs,
        targets,
        mlm_mask,
        pad_mask: seq.pad_mask.clone(),
    })
}

fn ids_to_array(rows: &[&[[u32; NUM_FEATURES]]], seq_len: usize) -> Array3<u32> {
    let batch = rows.len();
    let mut arr = Array3::zeros((batch, seq_len, NUM_FEATURES));
    for (b, row) in rows.iter().enumerate() {
        for (l, ids) in row.iter().enumerate() {
            for (f, &id) in ids.iter().enumerate() {
                arr[[b, l, f]] = id;
            }
        }
    }
    arr
}

fn mask_to_array(rows: &[&[bool]], seq_len: usize) -> Array2<bool> {
    let mut arr = Array2::from_elem((rows.len(), seq_len), false);
    for (b, row) in rows.iter().enumerate() {
        for (l, &m) in row.iter().enumerate() {
            arr[[b, l]] = m;
        }
    }
    arr
}

/// Collate plain sequences into a dense batch of shape `[B, seq_len, 6]`.
/// All sequences must share `seq_len`; an empty slice is a legal no-op batch.
pub fn collate_batch(
    seqs: &[FlowSequence],
    seq_len: usize,
) -> Result<Batch, SequencerError> {
    for s in seqs {
        if s.len() != seq_len {
            return Err(SequencerError::RaggedBatch {
                expected: seq_len,
                found: s.len(),
            });
        }
    }
    let ids: Vec<&[[u32; NUM_FEATURES]]> = seqs.iter().map(|s| s.ids.as_slice()).collect();
    let pads: Vec<&[bool]> = seqs.iter().map(|s| s.pad_mask.as_slice()).collect();
    let mut labels = Array2::zeros((seqs.len(), seq_len));
    for (b, s) in seqs.iter().enumerate() {
        for (l, &lab) in s.labels.iter().enumerate() {
            labels[[b, l]] = lab.index() as u8;
        }
    }
    Ok(Batch {
        seq_len,
        inputs: ids_to_array(&ids, seq_len),
        pad_mask: mask_to_array(&pads, seq_len),
        labels: Some(labels),
        targets: None,
        mlm_mask: None,
    })
}

/// Collate masked sequences for pre-training.
pub fn collate_masked_batch(
    seqs: &[MaskedSequence],
    seq_len: usize,
) -> Result<Batch, SequencerError> {
    for s in seqs {
        if s.inputs.len() != seq_len {
            return Err(SequencerError::RaggedBatch {
                expected: seq_len,
                found: s.inputs.len(),
            });
        }
    }
    let inputs: Vec<&[[u32; NUM_FEATURES]]> = seqs.iter().map(|s| s.inputs.as_slice()).collect();
    let targets: Vec<&[[u32; NUM_FEATURES]]> = seqs.iter().map(|s| s.targets.as_slice()).collect();
    let pads: Vec<&[bool]> = seqs.iter().map(|s| s.pad_mask.as_slice()).collect();
    let mlms: Vec<&[bool]> = seqs.iter().map(|s| s.mlm_mask.as_slice()).collect();
    Ok(Batch {
        seq_len,
        inputs: ids_to_array(&inputs, seq_len),
        pad_mask: mask_to_array(&pads, seq_len),
        labels: None,
        targets: Some(ids_to_array(&targets, seq_len)),
        mlm_mask: Some(mask_to_array(&mlms, seq_len)),
    })
}
