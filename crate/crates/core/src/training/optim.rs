//! SGD with momentum and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { lr: 1e-4, momentum: 0.9 }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: default_beta1(), beta2: default_beta2(), eps: default_adam_eps() }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// `v = momentum v + g; p -= lr v`.
pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: T, momentum: T) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// One bias-corrected Adam update; `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
) {
    let t = step as i32;
    let c1 = T::one() - beta1.powi(t);
    let c2 = T::one() - beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = beta1 * *m + (T::one() - beta1) * g;
        *v = beta2 * *v + (T::one() - beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Optimizer with one state slot per trainable parameter, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    /// `(parameter name, velocity or first moment, second moment)`.
    pub slots: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let adam = matches!(config, OptimizerConfig::Adam { .. });
        let slots = store
            .trainable()
            .map(|(_, e)| {
                let n = e.tensor.numel();
                (e.name.clone(), vec![T::zero(); n], if adam { vec![T::zero(); n] } else { Vec::new() })
            })
            .collect();
        Ok(Optimizer { config, step: 0, slots })
    }

    /// Applies accumulated gradients at learning rate `lr`. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let indices: Vec<usize> = store.trainable().map(|(i, _)| i).collect();
        if indices.len() != self.slots.len() {
            return Err(Error::config("optimizer state does not match the model's parameters"));
        }
        for (&idx, slot) in indices.iter().zip(&self.slots) {
            let e = store.entry(idx);
            if e.name != slot.0 {
                return Err(Error::config(format!("optimizer slot '{}' does not match parameter '{}'", slot.0, e.name)));
            }
            if let Some(g) = e.tensor.grad() {
                if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in parameter '{}' at element {pos}",
                        e.name
                    )));
                }
            }
        }
        self.step += 1;
        let lr = T::of(lr);
        for (&idx, (_, s1, s2)) in indices.iter().zip(self.slots.iter_mut()) {
            let t = store.tensor_mut(idx);
            let grad = t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); t.numel()]);
            match self.config {
                OptimizerConfig::Sgd { momentum, .. } => sgd_step(t.data_mut(), &grad, s1, lr, T::of(momentum)),
                OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                    adam_step(t.data_mut(), &grad, s1, s2, self.step, lr, T::of(beta1), T::of(beta2), T::of(eps))
                }
            }
        }
        Ok(())
    }
}
