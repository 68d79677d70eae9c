//! Per-feature discretization: six raw flow features -> six integer token ids.
//!
//! Numeric features (src port, dst port, packets, bytes, duration) are
//! quantile-binned: edges sit at the k/B quantiles of the fit data
//! (linear-interpolation quantiles, duplicates collapsed) and a value maps to
//! `FIRST_DATA + |{edges e : v > e}|`, so ties land in the lower bin.
//! Protocol and TCP flags are treated as a single categorical feature keyed
//! by `"PROTO|FLAGS"`, enumerated in first-occurrence order over the fit set.
//!
//! Ids 0..3 are reserved (PAD / MASK / UNK) in every vocabulary; data ids
//! start at 3. Unseen categorical values map to UNK at transform time; the
//! numeric path is total by construction.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::fingerprint::Fingerprint;
use crate::ingest::{BinaryLabel, FlowRecord, FlowTable};
use crate::token;
use crate::{FEATURE_NAMES, NUM_FEATURES};

/// Current on-disk format version.
pub const FORMAT_VERSION: u32 = 1;

/// Numeric features in vocabulary order (the categorical proto+flags feature
/// sits between dst_port and packets at index 2).
const NUMERIC_SLOTS: [usize; 5] = [0, 1, 3, 4, 5];

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct DiscretizerConfig {
    /// Quantile bin count per numeric feature.
    pub bins: usize,
}

impl Default for DiscretizerConfig {
    fn default() -> Self {
        DiscretizerConfig { bins: 32 }
    }
}

/// Fitted discretization model for all six features.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiscretizerModel {
    pub version: u32,
    pub bins: usize,
    /// Strictly increasing bin edges per numeric feature, keyed by feature
    /// name ordering of [`NUMERIC_SLOTS`].
    pub numeric_edges: Vec<Vec<f64>>,
    /// `"PROTO|FLAGS"` -> token id, in first-occurrence order.
    pub protoflags_table: IndexMap<String, u32>,
    /// Per-feature vocabulary size (reserved ids + data ids).
    pub vocab_sizes: [u32; NUM_FEATURES],
    /// Fingerprint of the table the model was fitted on.
    pub fit_fingerprint: String,
}

/// One flow after discretization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizedFlow {
    /// Token ids in feature order [src_port, dst_port, protoflags, packets,
    /// bytes, duration].
    pub ids: [u32; NUM_FEATURES],
    pub binary_label: BinaryLabel,
    pub order_index: u64,
}

/// Ordered tokenized flows plus the vocabulary context they were produced in.
#[derive(Debug, Clone)]
pub struct TokenizedTable {
    pub flows: Vec<TokenizedFlow>,
    pub vocab_sizes: [u32; NUM_FEATURES],
    pub discretizer_fingerprint: String,
}

impl TokenizedTable {
    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DiscretizerError {
    #[error("cannot fit a discretizer on an empty table")]
    EmptyFitSet,
    #[error("bin count must be >= 2, got {0}")]
    BadBinCount(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported discretizer format version {found} (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("malformed discretizer artifact: {0}")]
    Malformed(String),
}

/// Linear-interpolation quantile of `sorted` (ascending) at probability `q`.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = lo.min(n - 2) + 1;
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn numeric_value(record: &FlowRecord, slot: usize) -> f64 {
    match slot {
        0 => f64::from(record.src_port),
        1 => f64::from(record.dst_port),
        3 => record.packets as f64,
        4 => record.bytes as f64,
        5 => record.duration,
        _ => unreachable!("slot {slot} is not numeric"),
    }
}

fn protoflags_key(record: &FlowRecord) -> String {
    format!("{}|{}", record.proto, record.flags)
}

/// Fit bin edges and the categorical table on `table`.
pub fn fit_discretizer(
    table: &FlowTable,
    config: DiscretizerConfig,
) -> Result<DiscretizerModel, DiscretizerError> {
    if table.is_empty() {
        return Err(DiscretizerError::EmptyFitSet);
    }
    if config.bins < 2 {
        return Err(DiscretizerError::BadBinCount(config.bins));
    }

    let mut numeric_edges = Vec::with_capacity(NUMERIC_SLOTS.len());
    for &slot in &NUMERIC_SLOTS {
        let mut values: Vec<f64> = table
            .records
            .iter()
            .map(|r| numeric_value(r, slot))
            .collect();
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite feature values"));
        let mut edges: Vec<f64> = Vec::with_capacity(config.bins - 1);
        for k in 1..config.bins {
            let e = quantile_sorted(&values, k as f64 / config.bins as f64);
            // Collapse duplicate quantiles so edges stay strictly increasing.
            if edges.last().is_none_or(|last| e > *last) {
                edges.push(e);
            }
        }
        // A constant feature collapses to a single data bin.
        if edges.len() == 1 && values.first() == values.last() {
            edges.clear();
        }
        numeric_edges.push(edges);
    }

    let mut protoflags_table = IndexMap::new();
    for r in &table.records {
        let key = protoflags_key(r);
        let next_id = token::FIRST_DATA + protoflags_table.len() as u32;
        protoflags_table.entry(key).or_insert(next_id);
    }

    let mut vocab_sizes = [0u32; NUM_FEATURES];
    for (i, &slot) in NUMERIC_SLOTS.iter().enumerate() {
        vocab_sizes[slot] = token::FIRST_DATA + numeric_edges[i].len() as u32 + 1;
    }
    vocab_sizes[2] = token::FIRST_DATA + protoflags_table.len() as u32;

    Ok(DiscretizerModel {
        version: FORMAT_VERSION,
        bins: config.bins,
        numeric_edges,
        protoflags_table,
        vocab_sizes,
        fit_fingerprint: table.fingerprint(),
    })
}

impl DiscretizerModel {
    /// Token id for a numeric value: strict-greater bucketing over the edges,
    /// so a value equal to an edge stays in the lower bin.
    fn numeric_id(&self, edge_set: usize, v: f64) -> u32 {
        let edges = &self.numeric_edges[edge_set];
        // Edges are sorted; partition_point counts edges e with v > e.
        let below = edges.partition_point(|&e| v > e);
        token::FIRST_DATA + below as u32
    }

    /// Discretize one record. Total: unseen proto+flags strings map to UNK.
    pub fn transform_flow(&self, record: &FlowRecord) -> TokenizedFlow {
        let mut ids = [0u32; NUM_FEATURES];
        for (i, &slot) in NUMERIC_SLOTS.iter().enumerate() {
            ids[slot] = self.numeric_id(i, numeric_value(record, slot));
        }
        ids[2] = self
            .protoflags_table
            .get(&protoflags_key(record))
            .copied()
            .unwrap_or(token::UNK);
        TokenizedFlow {
            ids,
            binary_label: record.binary_label,
            order_index: record.order_index,
        }
    }

    /// Discretize a whole table, preserving order.
    pub fn transform_table(&self, table: &FlowTable) -> TokenizedTable {
        TokenizedTable {
            flows: table
                .records
                .iter()
                .map(|r| self.transform_flow(r))
                .collect(),
            vocab_sizes: self.vocab_sizes,
            discretizer_fingerprint: self.fingerprint(),
        }
    }

    /// Fingerprint of the fitted model itself (not the fit data): identifies
    /// the exact vocabularies a checkpoint was trained with.
    pub fn fingerprint(&self) -> String {
        let mut fp = Fingerprint::new();
        fp.update_u64(u64::from(self.version));
        fp.update_u64(self.bins as u64);
        for edges in &self.numeric_edges {
            fp.update_u64(edges.len() as u64);
            for &e in edges {
                fp.update_f64(e);
            }
        }
        for (k, &v) in &self.protoflags_table {
            fp.update_str(k);
            fp.update_u64(u64::from(v));
        }
        for &v in &self.vocab_sizes {
            fp.update_u64(u64::from(v));
        }
        fp.update_str(&self.fit_fingerprint);
        fp.finish()
    }

    pub fn vocab_size(&self, feature: usize) -> u32 {
        self.vocab_sizes[feature]
    }
}

/// Write the model as a versioned JSON artifact.
pub fn save_discretizer(model: &DiscretizerModel, path: &Path) -> Result<(), DiscretizerError> {
    let json = serde_json::to_string_pretty(model)
        .map_err(|e| DiscretizerError::Malformed(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Load a model saved by [`save_discretizer`]. The loaded model transforms
/// identically to the saved one: edges round-trip exactly through JSON.
pub fn load_discretizer(path: &Path) -> Result<DiscretizerModel, DiscretizerError> {
    let bytes = std::fs::read(path)?;
    let model: DiscretizerModel = serde_json::from_slice(&bytes)
        .map_err(|e| DiscretizerError::Malformed(e.to_string()))?;
    if model.version != FORMAT_VERSION {
        return Err(DiscretizerError::FormatVersionMismatch {
            found: model.version,
            expected: FORMAT_VERSION,
        });
    }
    if model.numeric_edges.len() != NUMERIC_SLOTS.len() {
        return Err(DiscretizerError::Malformed(format!(
            "expected {} numeric edge sets, found {}",
            NUMERIC_SLOTS.len(),
            model.numeric_edges.len()
        )));
    }
    for (i, edges) in model.numeric_edges.iter().enumerate() {
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DiscretizerError::Malformed(format!(
                "edges for {} are not strictly increasing",
                FEATURE_NAMES[NUMERIC_SLOTS[i]]
            )));
        }
    }
    Ok(model)
}
