//! AdamW with linear warmup and cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip, off when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 25,
            total_steps: 500,
            batch_size: 4,
            grad_clip: Some(5.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    /// Learning rate for 1-based step `t`: linear warmup to `lr`, then
    /// cosine decay reaching zero at `total_steps`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let (w, total) = (self.warmup_steps, self.total_steps);
        if t < w {
            return self.lr * t as f64 / w as f64;
        }
        if total == w {
            return self.lr;
        }
        let progress = (t - w) as f64 / (total - w) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Optimizer moments and step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Matrices decay; bias rows (a single row) do not.
    pub fn decays(t: &Tensor) -> bool {
        t.rows() > 1
    }

    /// Applies one update with learning rate `lr`. Returns the gradient norm
    /// before clipping.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, cfg: &OptimConfig) -> Result<f64> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        let clip = match cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (k, g) in grads.iter().enumerate() {
            let id = crate::numerics::ParamId(k);
            let decay = if Self::decays(store.get(id)) {
                cfg.weight_decay
            } else {
                0.0
            };
            let p = store.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * clip;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * p[j]);
            }
        }
        Ok(norm)
    }
}
