//! Flow-sequence language modeling for network intrusion detection.
//!
//! The pipeline treats a NetFlow record as a "word" and a contiguous window of
//! flows as a "sentence": six per-flow features are discretized into small
//! integer vocabularies, a compact transformer encoder is pre-trained with a
//! masked-language-model objective over flow sequences, and a per-flow binary
//! classification head is fine-tuned on labeled data. Evaluation follows a
//! multi-set protocol with accuracy/F1 aggregated as mean and standard error
//! per test domain.
//!
//! Module map:
//! - [`ingest`]: CIDDS-style CSV parsing, label mapping, split generation.
//! - [`discretizer`]: per-feature quantile binning and categorical vocabularies.
//! - [`sequencer`]: flow windows, MLM masking, batch collation.
//! - [`tensor`]: the reverse-mode tape the model trains on.
//! - [`model`]: embeddings, transformer encoder, MLM and classifier heads,
//!   checkpoints.
//! - [`optim`]: Adam with gradient clipping and the warmup/decay schedule.
//! - [`trainer`]: pre-training and fine-tuning loops.
//! - [`evaluator`]: per-flow prediction, confusion/accuracy/F1, report rendering.
//! - [`synth`]: deterministic synthetic fixtures for end-to-end runs.

pub mod discretizer;
pub mod evaluator;
pub mod fingerprint;
pub mod ingest;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sequencer;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use discretizer::{DiscretizerConfig, DiscretizerModel, TokenizedFlow, TokenizedTable};
pub use ingest::{BinaryLabel, DomainTag, FineLabel, FlowRecord, FlowTable, SplitSpec};
pub use evaluator::{AggregateReport, DomainReport, EvalMetrics};
pub use model::{FlowModel, ModelCheckpoint, ModelConfig};
pub use trainer::{TrainConfig, TrainReport};
pub use sequencer::{Batch, FlowSequence, MaskedSequence};

/// Feature positions within a tokenized flow, in the fixed order used across
/// embeddings, vocabularies and checkpoints.
pub const FEATURE_NAMES: [&str; 6] = [
    "src_port",
    "dst_port",
    "proto_flags",
    "packets",
    "bytes",
    "duration",
];

/// Number of per-flow features.
pub const NUM_FEATURES: usize = 6;

/// Reserved token ids shared by all six vocabularies.
pub mod token {
    /// Padding filler for positions past the end of a short sequence.
    pub const PAD: u32 = 0;
    /// Corruption marker used by the MLM objective.
    pub const MASK: u32 = 1;
    /// Out-of-vocabulary id for values unseen at fit time.
    pub const UNK: u32 = 2;
    /// First id assigned to actual data bins/categories.
    pub const FIRST_DATA: u32 = 3;
}
