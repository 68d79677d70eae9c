//! Evaluation split generation.
//!
//! Each evaluation set draws an exact per-label composition uniformly without
//! replacement from the source table, independently per set, then restores
//! source order so within-set sequence context matches the capture.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DomainTag, FineLabel, FlowTable, IngestError};
use crate::rng::stream_rng;

/// Exact composition and seeding for a family of evaluation sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub composition: BTreeMap<FineLabel, u64>,
    pub num_sets: u32,
    pub seed: u64,
}

impl SplitSpec {
    pub fn total(&self) -> u64 {
        self.composition.values().sum()
    }
}

/// The published per-set composition for each test domain.
pub fn preset_composition(domain: DomainTag) -> BTreeMap<FineLabel, u64> {
    let mut c = BTreeMap::new();
    match domain {
        DomainTag::Cidds1Internal => {
            c.insert(FineLabel::Normal, 10_000);
            c.insert(FineLabel::Dos, 9_000);
            c.insert(FineLabel::PortScan, 935);
            c.insert(FineLabel::PingScan, 45);
            c.insert(FineLabel::BruteForce, 20);
        }
        DomainTag::Cidds1External => {
            c.insert(FineLabel::Unknown, 10_000);
            c.insert(FineLabel::Suspicious, 10_000);
        }
        DomainTag::Cidds2 => {
            c.insert(FineLabel::Normal, 10_000);
            c.insert(FineLabel::Scan, 10_000);
        }
    }
    c
}

/// Generate `spec.num_sets` evaluation tables from `table`.
///
/// Per set and per label, indices are sampled uniformly without replacement
/// from that label's pool (sets are drawn independently of each other), and
/// the resulting records are re-sorted by `order_index`. Identical
/// `(table, spec)` inputs give identical output.
pub fn make_eval_splits(
    table: &FlowTable,
    spec: &SplitSpec,
) -> Result<Vec<FlowTable>, IngestError> {
    // Pool of record positions per label, in source order.
    let mut pools: BTreeMap<FineLabel, Vec<usize>> = BTreeMap::new();
    for (i, r) in table.records.iter().enumerate() {
        pools.entry(r.fine_label).or_default().push(i);
    }
    for (&label, &want) in &spec.composition {
        let have = pools.get(&label).map_or(0, |p| p.len()) as u64;
        if have < want {
            return Err(IngestError::InsufficientLabel {
                label,
                requested: want,
                available: have,
            });
        }
    }

    let mut out = Vec::with_capacity(spec.num_sets as usize);
    for set_idx in 0..spec.num_sets {
        let mut picked: Vec<usize> = Vec::with_capacity(spec.total() as usize);
        // BTreeMap iteration fixes the label order, so the rng consumption
        // pattern is stable across runs.
        for (&label, &want) in &spec.composition {
            if want == 0 {
                continue;
            }
            let pool = &pools[&label];
            let mut rng = stream_rng(spec.seed, &format!("split/{set_idx}/{label}"));
            let chosen = rand::seq::index::sample(&mut rng, pool.len(), want as usize);
            picked.extend(chosen.iter().map(|j| pool[j]));
        }
        picked.sort_unstable();
        let records = picked.iter().map(|&i| table.records[i].clone()).collect();
        out.push(FlowTable {
            records,
            domain_tag: table.domain_tag,
            source_path: table.source_path.clone(),
            header: table.header.clone(),
        });
    }
    Ok(out)
}
