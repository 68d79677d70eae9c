//! Full-model gradient check: analytic gradients of the joint MLM +
//! classification loss against central finite differences, for every
//! parameter tensor, at several random initializations.

use flowlm::model::{batch_from_ids, FlowModel, ModelConfig};
use flowlm::sequencer::Batch;
use ndarray::Array2;

const FD_H: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;
/// Relative-error denominator floor: below this magnitude the comparison is
/// effectively absolute.
const FLOOR: f64 = 1e-3;

fn config() -> ModelConfig {
    ModelConfig {
        per_feature_dim: 4,
        token_dim: 24,
        layers: 1,
        heads: 2,
        ffn_dim: 48,
        max_seq_len: 4,
        dropout: 0.0,
        vocab_sizes: [5, 6, 7, 5, 6, 7],
    }
}

/// Batch carrying labels, MLM targets and a mask together so one backward
/// sweep can cover both heads. Position [1, 3] is a pad.
fn probe_batch() -> Batch {
    let ids = vec![
        vec![[3u32, 4, 5, 3, 4, 5], [4, 5, 6, 4, 5, 6], [3, 3, 3, 3, 3, 3], [4, 4, 4, 4, 4, 4]],
        vec![[3, 5, 4, 3, 5, 4], [4, 3, 5, 4, 3, 5], [3, 4, 3, 4, 3, 4], [0, 0, 0, 0, 0, 0]],
    ];
    let pad = vec![vec![true; 4], vec![true, true, true, false]];
    let labels = vec![vec![0u8, 1, 0, 1], vec![1, 0, 1, 0]];
    let mut batch = batch_from_ids(&ids, &pad, Some(&labels));
    batch.targets = Some(batch.inputs.clone());
    let mut mask = Array2::from_elem((2, 4), false);
    for (b, pos) in [(0, 1), (0, 3), (1, 0), (1, 2)] {
        mask[[b, pos]] = true;
    }
    batch.mlm_mask = Some(mask);
    batch
}

fn joint_loss(model: &FlowModel<f64>, batch: &Batch) -> (f64, Option<Vec<ndarray::ArrayD<f64>>>) {
    let mut fwd = model.forward(batch, None).unwrap();
    let mlm = model.mlm_loss(&mut fwd, batch).unwrap();
    let cls = model.cls_loss(&mut fwd, batch).unwrap();
    let total = fwd.tape.add(mlm, cls);
    let value = fwd.tape.scalar_value(total);
    let grads = model.gradients(&fwd, total).unwrap();
    (value, Some(grads))
}

fn loss_only(model: &FlowModel<f64>, batch: &Batch) -> f64 {
    let mut fwd = model.forward(batch, None).unwrap();
    let mlm = model.mlm_loss(&mut fwd, batch).unwrap();
    let cls = model.cls_loss(&mut fwd, batch).unwrap();
    let total = fwd.tape.add(mlm, cls);
    fwd.tape.scalar_value(total)
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let batch = probe_batch();
    for seed in [11u64, 29, 47] {
        let mut model = FlowModel::<f64>::new(config(), seed).unwrap();
        let (_, grads) = joint_loss(&model, &batch);
        let grads = grads.unwrap();

        let names: Vec<String> = model
            .params
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        let mut worst = (0.0f64, String::new());
        for (t_idx, name) in names.iter().enumerate() {
            let len = model.params.get(name).len();
            // Probe everything in small tensors, an even stride elsewhere.
            let stride = (len / 64).max(1);
            let mut probe = (t_idx * 31) % stride.max(1);
            while probe < len {
                let analytic = grads[t_idx].as_slice().unwrap()[probe];

                let original = model.params.get(name).as_slice().unwrap()[probe];
                model.params.get_mut(name).as_slice_mut().unwrap()[probe] = original + FD_H;
                let plus = loss_only(&model, &batch);
                model.params.get_mut(name).as_slice_mut().unwrap()[probe] = original - FD_H;
                let minus = loss_only(&model, &batch);
                model.params.get_mut(name).as_slice_mut().unwrap()[probe] = original;

                let numeric = (plus - minus) / (2.0 * FD_H);
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(FLOOR);
                if rel > worst.0 {
                    worst = (rel, format!("{name}[{probe}]"));
                }
                assert!(
                    rel < REL_TOL,
                    "seed {seed}: {name}[{probe}] analytic {analytic:.3e} vs numeric {numeric:.3e} (rel {rel:.3e})"
                );
                probe += stride;
            }
        }
        eprintln!("seed {seed}: worst relative error {:.3e} at {}", worst.0, worst.1);
    }
}
