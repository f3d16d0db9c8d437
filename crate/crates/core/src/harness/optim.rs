//! AdamW with decoupled weight decay and a linear warm-up / half-cosine
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{HctError, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decay vectors (biases, norm scales and shifts) as well as matrices.
    pub decay_vectors: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay_vectors: false }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(HctError::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// `base · step / warmup` during warm-up, then
/// `base · (1 + cos(π (step − warmup) / (total − warmup))) / 2`.
pub fn cosine_warmup_lr(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let p = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// First and second moments of every parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    /// Updates taken so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.tensor(id).numel()]).collect();
        Self { cfg, t: 0, m: zeros(), v: zeros() }
    }

    /// One update of every trainable parameter from its stored gradient.
    /// Frozen parameters and their moments are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(HctError::Usage(format!(
                "optimizer tracks {} tensors, store holds {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let i = id.index();
            let tensor = store.tensor(id);
            let decay = if c.decay_vectors || tensor.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; tensor.numel()],
            };
            if grad.len() != self.m[i].len() {
                return Err(HctError::Usage(format!("moment size mismatch for `{}`", store.name(id))));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = store.tensor_mut(id).data_mut();
            for k in 0..data.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * grad[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * grad[k] * grad[k];
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                data[k] -= lr * (update + decay * data[k]);
            }
        }
        Ok(())
    }
}
