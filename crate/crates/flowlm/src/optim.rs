//! Adam with bias correction, global gradient-norm clipping, and a linear
//! warmup / linear decay learning-rate schedule.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::model::checkpoint::OptimizerSnapshot;
use crate::model::Parameters;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Peak learning rate reached at the end of warmup.
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Total planned updates; the decay phase ends here.
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2-norm ceiling applied to the full gradient vector.
    pub clip_norm: f64,
}

impl OptimConfig {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        OptimConfig {
            peak_lr,
            warmup_steps,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }

    /// Learning rate for the 0-based update index `step`: ramp linearly to
    /// the peak over warmup, then decay linearly toward zero at
    /// `total_steps` (never reaching it exactly).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps > self.warmup_steps {
            let remaining = self.total_steps.saturating_sub(step);
            return self.peak_lr * remaining as f64
                / (self.total_steps - self.warmup_steps) as f64;
        }
        self.peak_lr
    }
}

/// Diagnostics from one update, for progress logs.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Multiplier applied to gradients (1.0 when under the ceiling).
    pub clip_factor: f64,
}

pub struct Adam<T: Scalar> {
    pub config: OptimConfig,
    /// Completed updates.
    step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: OptimConfig, params: &Parameters<T>) -> Self {
        let m = params.iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect();
        let v = params.iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect();
        Adam {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn from_snapshot(config: OptimConfig, snapshot: OptimizerSnapshot<T>) -> Self {
        Adam {
            config,
            step: snapshot.step,
            m: snapshot.m,
            v: snapshot.v,
        }
    }

    pub fn snapshot(&self) -> OptimizerSnapshot<T> {
        OptimizerSnapshot {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn completed_steps(&self) -> u64 {
        self.step
    }

    /// One Adam update in place. `grads` aligns with the canonical parameter
    /// order.
    pub fn apply(&mut self, params: &mut Parameters<T>, grads: &[ArrayD<T>]) -> StepStats {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");

        let mut sq_sum = 0.0f64;
        for g in grads {
            for v in g.iter() {
                let x = Scalar::as_f64(*v);
                sq_sum += x * x;
            }
        }
        let grad_norm = sq_sum.sqrt();
        let clip_factor = if grad_norm > self.config.clip_norm && grad_norm > 0.0 {
            self.config.clip_norm / grad_norm
        } else {
            1.0
        };
        let clip = T::from_f64(clip_factor);

        let lr = self.config.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let beta1 = T::from_f64(self.config.beta1);
        let beta2 = T::from_f64(self.config.beta2);
        let one_minus_b1 = T::from_f64(1.0 - self.config.beta1);
        let one_minus_b2 = T::from_f64(1.0 - self.config.beta2);
        let corr1 = T::from_f64(1.0 - self.config.beta1.powi(t));
        let corr2 = T::from_f64(1.0 - self.config.beta2.powi(t));
        let eps = T::from_f64(self.config.eps);
        let lr_t = T::from_f64(lr);

        for (idx, (_, tensor)) in params.iter_mut().enumerate() {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(tensor)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, g| {
                    let gc = *g * clip;
                    *m = beta1 * *m + one_minus_b1 * gc;
                    *v = beta2 * *v + one_minus_b2 * gc * gc;
                    let m_hat = *m / corr1;
                    let v_hat = *v / corr2;
                    *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
                });
        }
        self.step += 1;
        StepStats {
            lr,
            grad_norm,
            clip_factor,
        }
    }
}
