//! Adam with decoupled weight decay, plus the polynomial-decay learning-rate
//! schedule used for both pretraining and fine-tuning.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::graph::NnError;
use super::tensor::{Element, Tensor};

/// Named parameter set. `BTreeMap` keeps iteration order stable so that
/// serialization and update order never depend on hashing.
pub type ParamMap<E> = BTreeMap<String, Arc<Tensor<E>>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: applied directly to the weights, not via the moments.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates, keyed like the parameter map. Created
/// lazily the first time a parameter receives a gradient.
pub struct AdamState<E: Element> {
    m: BTreeMap<String, Tensor<E>>,
    v: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> AdamState<E> {
    pub fn new() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<E: Element> Default for AdamState<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// One optimizer step over every parameter that has a gradient. Parameters
/// without a gradient this step are left untouched (no decay either), so a
/// disabled loss branch cannot silently shrink the weights it feeds.
///
/// `t` is the 1-based step index used for bias correction.
pub fn adam_step<E: Element>(
    params: &mut ParamMap<E>,
    grads: &BTreeMap<String, Tensor<E>>,
    state: &mut AdamState<E>,
    t: usize,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), NnError> {
    assert!(t >= 1, "adam step index is 1-based");
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let b1 = E::from_f64(cfg.beta1);
    let b1c = E::from_f64(1.0 - cfg.beta1);
    let b2 = E::from_f64(cfg.beta2);
    let b2c = E::from_f64(1.0 - cfg.beta2);
    for (name, grad) in grads {
        let param = params.get_mut(name).ok_or_else(|| NnError::Invalid {
            op: "adam_step",
            detail: format!("gradient for unknown parameter '{}'", name),
        })?;
        if grad.shape() != param.shape() {
            return Err(NnError::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "'{}': param {:?} vs grad {:?}",
                    name,
                    param.shape(),
                    grad.shape()
                ),
            });
        }
        if let Some(index) = grad.first_non_finite() {
            return Err(NnError::NonFinite {
                op: "adam_step",
                node: 0,
                index,
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let p = Arc::make_mut(param);
        for i in 0..grad.numel() {
            let g = grad.data()[i];
            let mi = b1 * m.data()[i] + b1c * g;
            let vi = b2 * v.data()[i] + b2c * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi.to_f64() / bc1;
            let vhat = vi.to_f64() / bc2;
            let x = p.data()[i].to_f64();
            let step = lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * x);
            p.data_mut()[i] = E::from_f64(x - step);
        }
        if let Some(index) = p.first_non_finite() {
            return Err(NnError::NonFinite {
                op: "adam_step",
                node: 0,
                index,
            });
        }
    }
    Ok(())
}

/// Polynomial decay with optional linear warmup: ramps to `lr0` over
/// `warmup` steps, then scales by `(1 - progress)^power` down to exactly 0
/// at `total_steps`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub total_steps: usize,
    pub power: f64,
    pub warmup_steps: usize,
}

impl LrSchedule {
    /// Learning rate for 0-based step `t`.
    pub fn at(&self, t: usize) -> f64 {
        if t < self.warmup_steps {
            return self.lr0 * (t + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.lr0;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = ((t - self.warmup_steps) as f64 / span).min(1.0);
        self.lr0 * (1.0 - progress).powf(self.power)
    }
}
