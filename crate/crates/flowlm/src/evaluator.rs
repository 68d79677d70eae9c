//! Per-flow prediction, confusion/accuracy/F1, multi-set aggregation and
//! Table-style report rendering.
//!
//! Malicious is the positive class throughout. A flow predicted exactly
//! (0.5, 0.5) counts as malicious: on a tie the conservative call is an
//! alarm, and ties are measure-zero for trained models anyway.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretizer::TokenizedTable;
use crate::ingest::BinaryLabel;
use crate::model::{FlowModel, ModelCheckpoint, ModelError, TrainPhase};
use crate::sequencer::{collate_batch, segment_for_eval, SequencerError};
use crate::tensor::Scalar;

/// Windows per forward pass during evaluation.
const EVAL_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sequencer(#[from] SequencerError),
    #[error("evaluation config mismatch: {0}")]
    ConfigMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowPrediction {
    pub order_index: u64,
    pub prob_benign: f64,
    pub prob_malicious: f64,
    pub predicted: BinaryLabel,
    pub actual: BinaryLabel,
}

/// Predicted class under the tie-to-malicious rule.
pub fn decide(prob_benign: f64, prob_malicious: f64) -> BinaryLabel {
    if prob_malicious >= prob_benign {
        BinaryLabel::Malicious
    } else {
        BinaryLabel::Benign
    }
}

/// Classify every flow of an evaluation set: non-overlapping windows of
/// length `seq_len`, one softmax per real position, exactly one prediction
/// per flow, in source order.
pub fn predict_flows<T: Scalar>(
    model: &FlowModel<T>,
    table: &TokenizedTable,
    seq_len: usize,
) -> Result<Vec<FlowPrediction>, EvalError> {
    if model.config.vocab_sizes != table.vocab_sizes {
        return Err(EvalError::ConfigMismatch(format!(
            "model vocab {:?} disagrees with table vocab {:?}",
            model.config.vocab_sizes, table.vocab_sizes
        )));
    }
    let windows = segment_for_eval(table, seq_len)?;
    let mut predictions = Vec::with_capacity(table.len());
    for chunk in windows.chunks(EVAL_CHUNK) {
        let batch = collate_batch(chunk, seq_len)?;
        let probs = model.predict_probs(&batch)?;
        for (b, seq) in chunk.iter().enumerate() {
            for pos in 0..seq.real_len() {
                let p_ben = probs[[b, pos, 0]];
                let p_mal = probs[[b, pos, 1]];
                predictions.push(FlowPrediction {
                    order_index: seq.order_index[pos],
                    prob_benign: p_ben,
                    prob_malicious: p_mal,
                    predicted: decide(p_ben, p_mal),
                    actual: seq.labels[pos],
                });
            }
        }
    }
    debug_assert_eq!(predictions.len(), table.len());
    Ok(predictions)
}

/// Checkpoint-level entry: enforces the fine-tuned phase and discretizer
/// lineage before predicting.
pub fn predict_with_checkpoint<T: Scalar>(
    ckpt: &ModelCheckpoint<T>,
    table: &TokenizedTable,
    seq_len: usize,
) -> Result<Vec<FlowPrediction>, EvalError> {
    if ckpt.meta.phase != TrainPhase::Finetuned {
        return Err(EvalError::ConfigMismatch(format!(
            "checkpoint phase is {}, evaluation requires finetuned",
            ckpt.meta.phase
        )));
    }
    if ckpt.discretizer_fingerprint != table.discretizer_fingerprint {
        return Err(EvalError::ConfigMismatch(format!(
            "checkpoint discretizer {} but table was tokenized with {}",
            ckpt.discretizer_fingerprint, table.discretizer_fingerprint
        )));
    }
    let model = FlowModel::from_parts(ckpt.config.clone(), ckpt.params.clone())?;
    predict_flows(&model, table, seq_len)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(predictions: &[FlowPrediction]) -> ConfusionMatrix {
    confusion_pairs(
        predictions.iter().map(|p| p.predicted),
        predictions.iter().map(|p| p.actual),
    )
}

pub fn confusion_pairs(
    predicted: impl IntoIterator<Item = BinaryLabel>,
    actual: impl IntoIterator<Item = BinaryLabel>,
) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for (pred, act) in predicted.into_iter().zip(actual) {
        match (pred, act) {
            (BinaryLabel::Malicious, BinaryLabel::Malicious) => cm.tp += 1,
            (BinaryLabel::Malicious, BinaryLabel::Benign) => cm.fp += 1,
            (BinaryLabel::Benign, BinaryLabel::Benign) => cm.tn += 1,
            (BinaryLabel::Benign, BinaryLabel::Malicious) => cm.fn_ += 1,
        }
    }
    cm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub set_id: u32,
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: ConfusionMatrix,
}

/// Accuracy and F1 (malicious positive); F1 is defined as 0 when its
/// denominator vanishes.
pub fn compute_metrics(cm: ConfusionMatrix, set_id: u32) -> EvalMetrics {
    let total = cm.total();
    let accuracy = if total == 0 {
        0.0
    } else {
        (cm.tp + cm.tn) as f64 / total as f64
    };
    let denom = 2 * cm.tp + cm.fp + cm.fn_;
    let f1 = if denom == 0 {
        0.0
    } else {
        2.0 * cm.tp as f64 / denom as f64
    };
    EvalMetrics {
        set_id,
        accuracy,
        f1,
        confusion: cm,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    /// Standard error: sample standard deviation over sqrt(n).
    pub se: f64,
}

fn stat(values: &[f64]) -> MetricStat {
    let n = values.len();
    if n == 0 {
        return MetricStat { mean: 0.0, se: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return MetricStat { mean, se: 0.0 };
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    MetricStat {
        mean,
        se: var.sqrt() / (n as f64).sqrt(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub accuracy: MetricStat,
    pub f1: MetricStat,
    pub sets: Vec<EvalMetrics>,
    pub warnings: Vec<String>,
}

/// Mean and standard error of both metrics over an eval-set family.
pub fn aggregate_runs(domain: &str, sets: Vec<EvalMetrics>) -> DomainReport {
    let accs: Vec<f64> = sets.iter().map(|m| m.accuracy).collect();
    let f1s: Vec<f64> = sets.iter().map(|m| m.f1).collect();
    let mut warnings = Vec::new();
    if sets.len() == 1 {
        warnings.push(
            "single evaluation set: standard error is undefined, reported as 0".to_string(),
        );
    }
    DomainReport {
        domain: domain.to_string(),
        accuracy: stat(&accs),
        f1: stat(&f1s),
        sets,
        warnings,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub domains: Vec<DomainReport>,
}

fn cell(stat: &MetricStat, populated: bool) -> String {
    if populated {
        format!("{:.3}({:.3})", stat.mean, stat.se)
    } else {
        "-".to_string()
    }
}

impl AggregateReport {
    /// Plain-text table with one row per test domain and mean(stderr)
    /// cells.
    pub fn render_text(&self) -> String {
        let mut width = "test domain".len();
        for d in &self.domains {
            width = width.max(d.domain.len());
        }
        let mut out = format!("{:<width$}  {:>12}  {:>12}\n", "test domain", "accuracy", "f1");
        for d in &self.domains {
            let populated = !d.sets.is_empty();
            out.push_str(&format!(
                "{:<width$}  {:>12}  {:>12}\n",
                d.domain,
                cell(&d.accuracy, populated),
                cell(&d.f1, populated),
            ));
        }
        out
    }

    /// Machine view: domain -> {accuracy: {mean, se}, f1: {mean, se},
    /// sets: [...]}.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = IndexMap::new();
        for d in &self.domains {
            map.insert(d.domain.clone(), d);
        }
        serde_json::to_value(map).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lab(malicious: bool) -> BinaryLabel {
        if malicious {
            BinaryLabel::Malicious
        } else {
            BinaryLabel::Benign
        }
    }

    #[test]
    fn decide_follows_higher_probability_with_tie_to_malicious() {
        assert_eq!(decide(0.99, 0.01), BinaryLabel::Benign);
        assert_eq!(decide(0.01, 0.99), BinaryLabel::Malicious);
        assert_eq!(decide(0.5, 0.5), BinaryLabel::Malicious);
        // Swapping the pair flips every non-tied decision.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let p: f64 = rng.random();
            if (p - 0.5).abs() < 1e-9 {
                continue;
            }
            assert_ne!(decide(p, 1.0 - p), decide(1.0 - p, p));
        }
    }

    #[test]
    fn confusion_all_correct_and_all_benign() {
        let preds: Vec<BinaryLabel> = (0..20).map(|i| lab(i < 10)).collect();
        let actual = preds.clone();
        let cm = confusion_pairs(preds.iter().copied(), actual.iter().copied());
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (10, 10, 0, 0));

        let all_benign = vec![BinaryLabel::Benign; 20];
        let cm = confusion_pairs(all_benign, actual);
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (0, 10, 0, 10));
    }

    #[test]
    fn confusion_matches_brute_force_tally_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let preds: Vec<BinaryLabel> = (0..1000).map(|_| lab(rng.random())).collect();
        let actual: Vec<BinaryLabel> = (0..1000).map(|_| lab(rng.random())).collect();
        let cm = confusion_pairs(preds.iter().copied(), actual.iter().copied());
        // Independent tally, element by element.
        let mut tally = [0u64; 4];
        for (p, a) in preds.iter().zip(&actual) {
            let idx = match (p, a) {
                (BinaryLabel::Malicious, BinaryLabel::Malicious) => 0,
                (BinaryLabel::Malicious, BinaryLabel::Benign) => 1,
                (BinaryLabel::Benign, BinaryLabel::Benign) => 2,
                (BinaryLabel::Benign, BinaryLabel::Malicious) => 3,
            };
            tally[idx] += 1;
        }
        assert_eq!((cm.tp, cm.fp, cm.tn, cm.fn_), (tally[0], tally[1], tally[2], tally[3]));
        assert_eq!(cm.total(), 1000);
    }

    #[test]
    fn metrics_match_named_examples() {
        let m = compute_metrics(
            ConfusionMatrix {
                tp: 9,
                fp: 1,
                tn: 9,
                fn_: 1,
            },
            0,
        );
        assert!((m.accuracy - 0.9).abs() < 1e-12);
        assert!((m.f1 - 0.9).abs() < 1e-12);

        let degenerate = compute_metrics(
            ConfusionMatrix {
                tp: 0,
                fp: 0,
                tn: 10,
                fn_: 0,
            },
            1,
        );
        assert!((degenerate.accuracy - 1.0).abs() < 1e-12);
        assert_eq!(degenerate.f1, 0.0);
    }

    #[test]
    fn metrics_match_formula_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..1000 {
            let cm = ConfusionMatrix {
                tp: rng.random_range(0..50),
                fp: rng.random_range(0..50),
                tn: rng.random_range(0..50),
                fn_: rng.random_range(0..50),
            };
            let m = compute_metrics(cm, i);
            let total = (cm.tp + cm.fp + cm.tn + cm.fn_) as f64;
            let acc = if total == 0.0 {
                0.0
            } else {
                (cm.tp + cm.tn) as f64 / total
            };
            let denom = (2 * cm.tp + cm.fp + cm.fn_) as f64;
            let f1 = if denom == 0.0 {
                0.0
            } else {
                2.0 * cm.tp as f64 / denom
            };
            assert!((m.accuracy - acc).abs() < 1e-12);
            assert!((m.f1 - f1).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&m.accuracy));
            assert!((0.0..=1.0).contains(&m.f1));
        }
    }

    fn metrics_with(acc: f64, id: u32) -> EvalMetrics {
        EvalMetrics {
            set_id: id,
            accuracy: acc,
            f1: acc,
            confusion: ConfusionMatrix::default(),
        }
    }

    #[test]
    fn aggregate_examples() {
        let identical = aggregate_runs(
            "d",
            (0..10).map(|i| metrics_with(0.97, i)).collect(),
        );
        assert!((identical.accuracy.mean - 0.97).abs() < 1e-12);
        assert_eq!(identical.accuracy.se, 0.0);

        let two = aggregate_runs("d", vec![metrics_with(0.9, 0), metrics_with(1.0, 1)]);
        assert!((two.accuracy.mean - 0.95).abs() < 1e-12);
        assert!((two.accuracy.se - 0.05).abs() < 1e-12);

        let single = aggregate_runs("d", vec![metrics_with(0.8, 0)]);
        assert_eq!(single.accuracy.se, 0.0);
        assert!(!single.warnings.is_empty());
    }

    #[test]
    fn render_formats_cells_and_dashes() {
        let mut populated = aggregate_runs("cidds1_internal", vec![metrics_with(0.9941, 0), metrics_with(0.9941, 1)]);
        populated.accuracy = MetricStat {
            mean: 0.9941,
            se: 0.0021,
        };
        populated.f1 = MetricStat {
            mean: 0.9961,
            se: 0.0009,
        };
        let empty = aggregate_runs("cidds2", Vec::new());
        let report = AggregateReport {
            domains: vec![populated, empty],
        };
        let text = report.render_text();
        assert!(text.contains("0.994(0.002)"), "text was:\n{text}");
        assert!(text.contains("0.996(0.001)"));
        let last = text.lines().last().unwrap();
        assert!(last.contains("cidds2") && last.contains('-'));

        // The machine view carries the same numbers the text was built from.
        let json = report.to_json();
        let acc = &json["cidds1_internal"]["accuracy"];
        assert!((acc["mean"].as_f64().unwrap() - 0.9941).abs() < 1e-12);
        assert!((acc["se"].as_f64().unwrap() - 0.0021).abs() < 1e-12);
        assert!(json["cidds2"]["sets"].as_array().unwrap().is_empty());
    }
}
