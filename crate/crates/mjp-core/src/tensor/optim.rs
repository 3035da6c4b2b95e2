//! AdamW with decoupled weight decay, plus the cosine schedule with linear
//! warm-up used by the training harness.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamWParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub params: AdamWParams,
    pub step: u64,
    moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl AdamWState {
    /// Initializes moment buffers from (name, shape-numel) pairs. The same
    /// name order must be used on every step.
    pub fn new(params: AdamWParams, named: &[(String, usize)]) -> Self {
        AdamWState {
            params,
            step: 0,
            moments: named
                .iter()
                .map(|(n, len)| (n.clone(), vec![0.0; *len], vec![0.0; *len]))
                .collect(),
        }
    }

    pub fn moment_names(&self) -> impl Iterator<Item = &str> {
        self.moments.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn moments_of(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn set_moments(&mut self, name: &str, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        let slot = self
            .moments
            .iter_mut()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::contract(format!("unknown optimizer slot {name}")))?;
        if m.len() != slot.1.len() || v.len() != slot.2.len() {
            return Err(Error::contract(format!("moment size mismatch for {name}")));
        }
        slot.1 = m;
        slot.2 = v;
        Ok(())
    }

    /// One decoupled-weight-decay update over `(name, tensor)` pairs, reading
    /// each tensor's accumulated gradient. Tensors without a gradient (or
    /// with `requires_grad` off) are skipped entirely; frozen parameters do
    /// not decay.
    pub fn step(&mut self, named_params: &mut [(String, &mut Tensor)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(t);
        let bc2 = 1.0 - p.beta2.powi(t);
        for (name, tensor) in named_params.iter_mut() {
            if !tensor.requires_grad {
                continue;
            }
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let slot = self
                .moments
                .iter_mut()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| {
                    Error::contract(format!("optimizer state not initialized for {name}"))
                })?;
            if slot.1.len() != grad.len() {
                return Err(Error::contract(format!(
                    "optimizer state shape mismatch for {name}"
                )));
            }
            let (_, m, v) = slot;
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                // decoupled decay: applied to the parameter, not the gradient
                data[i] -= p.lr * p.weight_decay * data[i];
                m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * grad[i];
                v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= p.lr * mhat / (vhat.sqrt() + p.eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` to `min_lr` over `total_steps`, with linear
/// warm-up over the first `warmup_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64, min_lr: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    let progress = progress.clamp(0.0, 1.0);
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}
