//! Adam with serializable moments.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::networks::NamedParams;
use crate::nn::scalar;

pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    slots: Vec<Slot>,
}

/// Copy of everything an [`Adam::step`] mutates, for rollback.
#[derive(Debug, Clone)]
pub struct AdamSnapshot {
    steps: u64,
    params: Vec<Tensor>,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(params: &NamedParams, lr: f64) -> Result<Self> {
        let slots = params
            .iter()
            .map(|(name, var)| {
                Ok(Slot {
                    name: name.clone(),
                    var: var.clone(),
                    m: var.zeros_like()?,
                    v: var.zeros_like()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            steps: 0,
            slots,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Global L2 norm of the gradients this optimizer owns.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for slot in &self.slots {
            if let Some(g) = grads.get(slot.var.as_tensor()) {
                total += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        Ok(total.sqrt())
    }

    /// One update. Parameters without a gradient keep their value and moments.
    pub fn step(&mut self, grads: &GradStore, clip_norm: Option<f64>) -> Result<()> {
        let scale = match clip_norm {
            Some(max) => {
                let norm = self.grad_norm(grads)?;
                if !norm.is_finite() {
                    return Err(Error::numeric("gradient norm"));
                }
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() };
            slot.m = ((&slot.m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            slot.v = ((&slot.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let next = (slot.var.as_tensor() - (update * self.lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<AdamSnapshot> {
        Ok(AdamSnapshot {
            steps: self.steps,
            params: self
                .slots
                .iter()
                .map(|s| s.var.as_tensor().copy())
                .collect::<candle_core::Result<Vec<_>>>()?,
            moments: self.slots.iter().map(|s| (s.m.clone(), s.v.clone())).collect(),
        })
    }

    pub fn restore(&mut self, snap: &AdamSnapshot) -> Result<()> {
        self.steps = snap.steps;
        for (slot, (p, (m, v))) in self.slots.iter_mut().zip(snap.params.iter().zip(&snap.moments)) {
            slot.var.set(p)?;
            slot.m = m.clone();
            slot.v = v.clone();
        }
        Ok(())
    }

    /// Moment tensors as `(prefix.m.<param>, prefix.v.<param>)` pairs.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.slots
            .iter()
            .flat_map(|s| {
                [
                    (format!("{prefix}.m.{}", s.name), s.m.clone()),
                    (format!("{prefix}.v.{}", s.name), s.v.clone()),
                ]
            })
            .collect()
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, prefix: &str, steps: u64) -> Result<()> {
        for slot in &mut self.slots {
            for (kind, target) in [("m", &mut slot.m), ("v", &mut slot.v)] {
                let key = format!("{prefix}.{kind}.{}", slot.name);
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
                if t.dims() != slot.var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer tensor {key} has wrong shape")));
                }
                *target = t.to_dtype(slot.var.dtype())?;
            }
        }
        self.steps = steps;
        Ok(())
    }
}
