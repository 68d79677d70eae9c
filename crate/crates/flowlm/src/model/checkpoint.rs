//! On-disk checkpoint container.
//!
//! A checkpoint is a directory holding `manifest.json` (format version,
//! dtype, config, fingerprints, training metadata, and a tensor table with
//! byte offsets) plus `weights.bin`, the little-endian concatenation of all
//! tensors in manifest order. Model parameters come first in canonical
//! order; when optimizer state is included, its first and second moments
//! follow under `opt/m/...` and `opt/v/...` names.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::{tensor_specs, Parameters};
use super::ModelConfig;
use crate::discretizer::DiscretizerModel;
use crate::tensor::{Dtype, Scalar};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which training stage produced the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPhase {
    Pretrained,
    Finetuned,
}

impl std::fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainPhase::Pretrained => "pretrained",
            TrainPhase::Finetuned => "finetuned",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Optimizer steps completed when the checkpoint was written.
    pub step: u64,
    /// Root seed the run was launched with.
    pub seed: u64,
    pub phase: TrainPhase,
}

/// Adam moments stored alongside parameters so a resumed run continues the
/// exact trajectory. Vectors align with the canonical parameter order.
#[derive(Debug, Clone)]
pub struct OptimizerSnapshot<T: Scalar> {
    pub step: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

#[derive(Debug, Clone)]
pub struct ModelCheckpoint<T: Scalar> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
    pub discretizer_fingerprint: String,
    pub meta: TrainingMeta,
    pub optimizer: Option<OptimizerSnapshot<T>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: Dtype,
    config: ModelConfig,
    discretizer_fingerprint: String,
    metadata: TrainingMeta,
    /// Present iff optimizer tensors are stored.
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

impl<T: Scalar> ModelCheckpoint<T> {
    /// Error unless the checkpoint was produced with this discretizer.
    pub fn validate_against(&self, disc: &DiscretizerModel) -> Result<(), CheckpointError> {
        if self.config.vocab_sizes != disc.vocab_sizes {
            return Err(CheckpointError::ConfigMismatch(format!(
                "vocab sizes {:?} disagree with discretizer {:?}",
                self.config.vocab_sizes, disc.vocab_sizes
            )));
        }
        let fp = disc.fingerprint();
        if self.discretizer_fingerprint != fp {
            return Err(CheckpointError::ConfigMismatch(format!(
                "discretizer fingerprint {} does not match checkpoint {}",
                fp, self.discretizer_fingerprint
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;

        let mut blob: Vec<u8> = Vec::new();
        let mut entries: Vec<TensorEntry> = Vec::new();
        let mut push_tensor = |name: String, tensor: &ArrayD<T>, blob: &mut Vec<u8>| {
            let offset = blob.len() as u64;
            for v in tensor.iter() {
                v.write_le(blob);
            }
            entries.push(TensorEntry {
                name,
                shape: tensor.shape().to_vec(),
                dtype: T::DTYPE,
                offset,
                byte_len: (tensor.len() * T::DTYPE.byte_width()) as u64,
            });
        };

        for (name, tensor) in self.params.iter() {
            push_tensor(name.to_string(), tensor, &mut blob);
        }
        if let Some(opt) = &self.optimizer {
            for (idx, tensor) in opt.m.iter().enumerate() {
                push_tensor(format!("opt/m/{}", self.params.name_at(idx)), tensor, &mut blob);
            }
            for (idx, tensor) in opt.v.iter().enumerate() {
                push_tensor(format!("opt/v/{}", self.params.name_at(idx)), tensor, &mut blob);
            }
        }

        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE,
            config: self.config.clone(),
            discretizer_fingerprint: self.discretizer_fingerprint.clone(),
            metadata: self.meta.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: entries,
        };
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
        let weights_path = dir.join(WEIGHTS_FILE);
        fs::write(&weights_path, &blob).map_err(io_err(&weights_path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest = serde_json::from_str(&json)
            .map_err(|e| CheckpointError::Malformed(format!("manifest: {e}")))?;

        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::FormatVersionMismatch {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if manifest.dtype != T::DTYPE {
            return Err(CheckpointError::ConfigMismatch(format!(
                "checkpoint dtype {} but caller expects {}",
                manifest.dtype.as_str(),
                T::DTYPE.as_str()
            )));
        }
        manifest
            .config
            .validate()
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

        let weights_path = dir.join(WEIGHTS_FILE);
        let blob = fs::read(&weights_path).map_err(io_err(&weights_path))?;
        let expected_len: u64 = manifest.tensors.iter().map(|t| t.byte_len).sum();
        if blob.len() as u64 != expected_len {
            return Err(CheckpointError::Malformed(format!(
                "weights.bin holds {} bytes, manifest expects {expected_len}",
                blob.len()
            )));
        }

        let read_tensor = |entry: &TensorEntry| -> Result<ArrayD<T>, CheckpointError> {
            let width = T::DTYPE.byte_width();
            let count: usize = entry.shape.iter().product();
            if entry.byte_len as usize != count * width {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {} byte length {} disagrees with shape {:?}",
                    entry.name, entry.byte_len, entry.shape
                )));
            }
            let start = entry.offset as usize;
            let end = start + entry.byte_len as usize;
            if end > blob.len() {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {} extends past end of weights.bin",
                    entry.name
                )));
            }
            let values: Vec<T> = blob[start..end]
                .chunks_exact(width)
                .map(T::read_le)
                .collect();
            ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| CheckpointError::Malformed(format!("tensor {}: {e}", entry.name)))
        };

        // Parameters come first, in canonical order with canonical shapes.
        let specs = tensor_specs(&manifest.config);
        if manifest.tensors.len() < specs.len() {
            return Err(CheckpointError::Malformed(format!(
                "manifest lists {} tensors, config requires {}",
                manifest.tensors.len(),
                specs.len()
            )));
        }
        let mut tensors: IndexMap<String, ArrayD<T>> = IndexMap::new();
        for ((name, shape, _), entry) in specs.iter().zip(&manifest.tensors) {
            if &entry.name != name || &entry.shape != shape {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {} with shape {:?} where {name} {shape:?} expected",
                    entry.name, entry.shape
                )));
            }
            tensors.insert(name.clone(), read_tensor(entry)?);
        }
        let params = Parameters::from_tensors(tensors);

        let optimizer = match manifest.optimizer_step {
            None => None,
            Some(step) => {
                let expected = 3 * specs.len();
                if manifest.tensors.len() != expected {
                    return Err(CheckpointError::Malformed(format!(
                        "optimizer state present but manifest lists {} tensors, expected {expected}",
                        manifest.tensors.len()
                    )));
                }
                let mut m = Vec::with_capacity(specs.len());
                let mut v = Vec::with_capacity(specs.len());
                for (idx, (name, _, _)) in specs.iter().enumerate() {
                    let me = &manifest.tensors[specs.len() + idx];
                    let ve = &manifest.tensors[2 * specs.len() + idx];
                    if me.name != format!("opt/m/{name}") || ve.name != format!("opt/v/{name}") {
                        return Err(CheckpointError::Malformed(format!(
                            "optimizer tensors for {name} out of order"
                        )));
                    }
                    m.push(read_tensor(me)?);
                    v.push(read_tensor(ve)?);
                }
                Some(OptimizerSnapshot { step, m, v })
            }
        };

        Ok(ModelCheckpoint {
            config: manifest.config,
            params,
            discretizer_fingerprint: manifest.discretizer_fingerprint,
            meta: manifest.metadata,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretizer::{fit_discretizer, DiscretizerConfig};
    use crate::model::{batch_from_ids, FlowModel};
    use crate::synth::{synth_table, SynthConfig, SynthKind};
    use crate::ingest::DomainTag;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            per_feature_dim: 3,
            token_dim: 18,
            layers: 1,
            heads: 2,
            ffn_dim: 24,
            max_seq_len: 6,
            dropout: 0.0,
            vocab_sizes: [7; 6],
        }
    }

    fn sample_checkpoint(with_optimizer: bool) -> ModelCheckpoint<f64> {
        let model = FlowModel::<f64>::new(tiny_config(), 21).unwrap();
        let optimizer = with_optimizer.then(|| OptimizerSnapshot {
            step: 17,
            m: model
                .params
                .iter()
                .map(|(_, t)| t.mapv(|v| v * 0.25))
                .collect(),
            v: model
                .params
                .iter()
                .map(|(_, t)| t.mapv(|v| v * v))
                .collect(),
        });
        ModelCheckpoint {
            config: model.config.clone(),
            params: model.params,
            discretizer_fingerprint: "fp-test".to_string(),
            meta: TrainingMeta {
                step: 17,
                seed: 21,
                phase: TrainPhase::Pretrained,
            },
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_bitwise_and_forward_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = sample_checkpoint(true);
        ckpt.save(dir.path()).unwrap();
        let loaded = ModelCheckpoint::<f64>::load(dir.path()).unwrap();

        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.meta, ckpt.meta);
        assert_eq!(loaded.discretizer_fingerprint, ckpt.discretizer_fingerprint);
        for (name, tensor) in ckpt.params.iter() {
            assert_eq!(tensor, loaded.params.get(name), "{name} drifted");
        }
        let (a, b) = (ckpt.optimizer.unwrap(), loaded.optimizer.unwrap());
        assert_eq!(a.step, b.step);
        assert_eq!(a.m, b.m);
        assert_eq!(a.v, b.v);

        // Same weights, same outputs.
        let model_a = FlowModel::from_parts(ckpt.config, ckpt.params).unwrap();
        let model_b = FlowModel::from_parts(loaded.config, loaded.params).unwrap();
        let ids = vec![vec![[3u32; 6], [4; 6], [5; 6]]];
        let batch = batch_from_ids(&ids, &[vec![true; 3]], None);
        let ha = model_a.forward(&batch, None).unwrap().hidden_values().clone();
        let hb = model_b.forward(&batch, None).unwrap().hidden_values().clone();
        assert_eq!(ha, hb);
    }

    #[test]
    fn optimizer_free_checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = sample_checkpoint(false);
        ckpt.save(dir.path()).unwrap();
        let loaded = ModelCheckpoint::<f64>::load(dir.path()).unwrap();
        assert!(loaded.optimizer.is_none());
    }

    #[test]
    fn manifest_entries_tile_the_weight_blob_exactly() {
        let dir = tempfile::tempdir().unwrap();
        sample_checkpoint(true).save(dir.path()).unwrap();
        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap(),
        )
        .unwrap();
        let entries = manifest["tensors"].as_array().unwrap();
        let mut expected_offset = 0u64;
        for e in entries {
            assert_eq!(e["offset"].as_u64().unwrap(), expected_offset);
            let len = e["byte_len"].as_u64().unwrap();
            let elems: u64 = e["shape"]
                .as_array()
                .unwrap()
                .iter()
                .map(|d| d.as_u64().unwrap())
                .product();
            assert_eq!(len, elems * 8, "f64 entries are 8 bytes each");
            expected_offset += len;
        }
        let blob_len = std::fs::metadata(dir.path().join(WEIGHTS_FILE))
            .unwrap()
            .len();
        assert_eq!(expected_offset, blob_len);
    }

    #[test]
    fn version_dtype_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        sample_checkpoint(false).save(dir.path()).unwrap();
        let manifest_path = dir.path().join(MANIFEST_FILE);

        // Future format version.
        let original = std::fs::read_to_string(&manifest_path).unwrap();
        std::fs::write(
            &manifest_path,
            original.replacen("\"format_version\": 1", "\"format_version\": 2", 1),
        )
        .unwrap();
        assert!(matches!(
            ModelCheckpoint::<f64>::load(dir.path()),
            Err(CheckpointError::FormatVersionMismatch { found: 2, expected: 1 })
        ));
        std::fs::write(&manifest_path, &original).unwrap();

        // Wrong element type for the requested precision.
        assert!(matches!(
            ModelCheckpoint::<f32>::load(dir.path()),
            Err(CheckpointError::ConfigMismatch(_))
        ));

        // Truncated weight blob.
        let weights_path = dir.path().join(WEIGHTS_FILE);
        let blob = std::fs::read(&weights_path).unwrap();
        std::fs::write(&weights_path, &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(
            ModelCheckpoint::<f64>::load(dir.path()),
            Err(CheckpointError::Malformed(_))
        ));
    }

    #[test]
    fn validate_against_discretizer_lineage() {
        let table = synth_table(&SynthConfig {
            rows: 64,
            seed: 5,
            kind: SynthKind::PortRule,
            domain: DomainTag::Cidds1Internal,
        });
        let disc = fit_discretizer(&table, DiscretizerConfig { bins: 4 }).unwrap();

        let mut config = tiny_config();
        config.vocab_sizes = disc.vocab_sizes;
        let model = FlowModel::<f64>::new(config.clone(), 3).unwrap();
        let good = ModelCheckpoint {
            config: config.clone(),
            params: model.params.clone(),
            discretizer_fingerprint: disc.fingerprint(),
            meta: TrainingMeta {
                step: 0,
                seed: 3,
                phase: TrainPhase::Pretrained,
            },
            optimizer: None,
        };
        good.validate_against(&disc).unwrap();

        let mut wrong_fp = good.clone();
        wrong_fp.discretizer_fingerprint = "other".to_string();
        assert!(matches!(
            wrong_fp.validate_against(&disc),
            Err(CheckpointError::ConfigMismatch(_))
        ));

        let mut wrong_vocab = good;
        wrong_vocab.config.vocab_sizes[0] += 1;
        assert!(matches!(
            wrong_vocab.validate_against(&disc),
            Err(CheckpointError::ConfigMismatch(_))
        ));
    }
}
