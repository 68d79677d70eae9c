//! Named parameter tensors in a fixed canonical order.
//!
//! The order defined by [`tensor_specs`] is the single source of truth for
//! checkpoint layout, optimizer state alignment and deterministic
//! initialization, so every consumer iterates the same way.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::rng::stream_rng;
use crate::tensor::Scalar;
use crate::FEATURE_NAMES;

/// How a tensor is filled at initialization time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Truncated normal, sigma 0.02, resampled beyond two sigma.
    TruncNormal,
    /// Zero-filled (biases, layer-norm offsets).
    Zeros,
    /// One-filled (layer-norm gains).
    Ones,
}

/// Name, shape and init rule for every tensor the model owns, in canonical
/// order.
pub fn tensor_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let e = config.per_feature_dim;
    let h = config.token_dim;
    let f = config.ffn_dim;
    let mut specs = Vec::new();
    for (i, feat) in FEATURE_NAMES.iter().enumerate() {
        specs.push((
            format!("embed/{feat}"),
            vec![config.vocab_sizes[i] as usize, e],
            InitKind::TruncNormal,
        ));
    }
    specs.push((
        "positional".to_string(),
        vec![config.max_seq_len, h],
        InitKind::TruncNormal,
    ));
    for l in 0..config.layers {
        let p = format!("layer{l}");
        specs.push((format!("{p}/ln1/gain"), vec![h], InitKind::Ones));
        specs.push((format!("{p}/ln1/bias"), vec![h], InitKind::Zeros));
        for proj in ["q", "k", "v", "o"] {
            specs.push((
                format!("{p}/attn/{proj}/w"),
                vec![h, h],
                InitKind::TruncNormal,
            ));
            specs.push((format!("{p}/attn/{proj}/b"), vec![h], InitKind::Zeros));
        }
        specs.push((format!("{p}/ln2/gain"), vec![h], InitKind::Ones));
        specs.push((format!("{p}/ln2/bias"), vec![h], InitKind::Zeros));
        specs.push((format!("{p}/ffn/w1"), vec![h, f], InitKind::TruncNormal));
        specs.push((format!("{p}/ffn/b1"), vec![f], InitKind::Zeros));
        specs.push((format!("{p}/ffn/w2"), vec![f, h], InitKind::TruncNormal));
        specs.push((format!("{p}/ffn/b2"), vec![h], InitKind::Zeros));
    }
    specs.push(("final_ln/gain".to_string(), vec![h], InitKind::Ones));
    specs.push(("final_ln/bias".to_string(), vec![h], InitKind::Zeros));
    specs.push(("mlm/trunk/w".to_string(), vec![h, h], InitKind::TruncNormal));
    specs.push(("mlm/trunk_ln/gain".to_string(), vec![h], InitKind::Ones));
    specs.push(("mlm/trunk_ln/bias".to_string(), vec![h], InitKind::Zeros));
    for (i, feat) in FEATURE_NAMES.iter().enumerate() {
        specs.push((
            format!("mlm/out/{feat}"),
            vec![h, config.vocab_sizes[i] as usize],
            InitKind::TruncNormal,
        ));
    }
    specs.push(("cls/w".to_string(), vec![h, 2], InitKind::TruncNormal));
    specs.push(("cls/b".to_string(), vec![2], InitKind::Zeros));
    specs
}

/// The model's learnable tensors, keyed by canonical name.
#[derive(Debug, Clone)]
pub struct Parameters<T: Scalar> {
    tensors: IndexMap<String, ArrayD<T>>,
}

impl<T: Scalar> Parameters<T> {
    /// Deterministic initialization: each tensor draws from its own named
    /// RNG stream so the result is independent of iteration order.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut tensors = IndexMap::new();
        for (name, shape, kind) in tensor_specs(config) {
            let dim = IxDyn(&shape);
            let arr = match kind {
                InitKind::Zeros => ArrayD::zeros(dim),
                InitKind::Ones => ArrayD::ones(dim),
                InitKind::TruncNormal => {
                    let mut rng = stream_rng(seed, &format!("init/{name}"));
                    ArrayD::from_shape_simple_fn(dim, || {
                        T::from_f64(trunc_normal(&mut rng, 0.02))
                    })
                }
            };
            tensors.insert(name, arr);
        }
        Parameters { tensors }
    }

    /// Build from preloaded tensors (checkpoint restore). Order must already
    /// be canonical; callers validate against [`tensor_specs`].
    pub(crate) fn from_tensors(tensors: IndexMap<String, ArrayD<T>>) -> Self {
        Parameters { tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<T> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name}"))
    }

    pub fn name_at(&self, idx: usize) -> &str {
        self.tensors
            .get_index(idx)
            .map(|(k, _)| k.as_str())
            .expect("parameter index in range")
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.tensors
            .get_index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar element count across all tensors.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Draw from N(0, sigma^2), rejecting samples beyond two sigma.
fn trunc_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    loop {
        // Box-Muller via rand_distr keeps this simple and portable.
        let n: f64 = rng.sample(rand_distr::StandardNormal);
        let v = n * sigma;
        if v.abs() <= 2.0 * sigma {
            return v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            per_feature_dim: 4,
            token_dim: 24,
            layers: 1,
            heads: 2,
            ffn_dim: 8,
            max_seq_len: 4,
            dropout: 0.0,
            vocab_sizes: [5, 6, 4, 7, 7, 5],
        }
    }

    #[test]
    fn spec_inventory_matches_config_shapes() {
        let cfg = tiny_config();
        let specs = tensor_specs(&cfg);
        // 6 embeddings + positional + 16 per layer + 2 final LN + 3 trunk
        // + 6 outputs + 2 cls = 36 for one layer.
        assert_eq!(specs.len(), 6 + 1 + 16 * cfg.layers + 2 + 3 + 6 + 2);
        let names: Vec<&str> = specs.iter().map(|(n, _, _)| n.as_str()).collect();
        assert_eq!(names[0], "embed/src_port");
        assert!(names.contains(&"layer0/attn/q/w"));
        assert!(names.contains(&"mlm/out/duration"));
        assert_eq!(*names.last().unwrap(), "cls/b");
        let by_name: std::collections::BTreeMap<&str, &[usize]> = specs
            .iter()
            .map(|(n, s, _)| (n.as_str(), s.as_slice()))
            .collect();
        assert_eq!(by_name["embed/proto_flags"], &[4, 4]);
        assert_eq!(by_name["positional"], &[4, 24]);
        assert_eq!(by_name["layer0/ffn/w1"], &[24, 8]);
        assert_eq!(by_name["mlm/out/packets"], &[24, 7]);
        assert_eq!(by_name["cls/w"], &[24, 2]);
    }

    #[test]
    fn init_is_deterministic_and_respects_kinds() {
        let cfg = tiny_config();
        let a = Parameters::<f32>::init(&cfg, 7);
        let b = Parameters::<f32>::init(&cfg, 7);
        for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(ta, tb);
        }
        let c = Parameters::<f32>::init(&cfg, 8);
        assert_ne!(a.get("cls/w"), c.get("cls/w"));
        assert!(a.get("layer0/ln1/gain").iter().all(|v| *v == 1.0));
        assert!(a.get("layer0/attn/q/b").iter().all(|v| *v == 0.0));
        // Truncation bound: no draw exceeds two sigma.
        assert!(a.get("cls/w").iter().all(|v| v.abs() <= 0.04 + 1e-9));
        assert!(a.all_finite());
    }
}
