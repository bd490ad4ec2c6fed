//! Parameter update rules.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Param};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpdateRule {
    /// `buf = momentum * buf + g; p -= lr * buf` (the first step sets `buf = g`).
    SgdMomentum { lr: f64, momentum: f64 },
    /// Adam with decoupled weight decay.
    AdamW {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl UpdateRule {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        UpdateRule::SgdMomentum { lr, momentum }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        UpdateRule::AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            UpdateRule::SgdMomentum { lr, .. } | UpdateRule::AdamW { lr, .. } => lr,
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match self {
            UpdateRule::SgdMomentum { lr, .. } | UpdateRule::AdamW { lr, .. } => *lr = new_lr,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Slot<T> {
    first: Vec<T>,
    second: Vec<T>,
    steps: u64,
}

/// Per-parameter optimizer state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub rule: UpdateRule,
    state: HashMap<String, Slot<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(rule: UpdateRule) -> Self {
        Optimizer {
            rule,
            state: HashMap::new(),
        }
    }

    /// Weight decay is applied to tensors of rank >= 2 only (not to biases or
    /// normalization affines).
    pub fn step<'a, I>(&mut self, params: I, grads: &Gradients<T>) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Param<T>>,
    {
        for p in params {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.by_name(&p.name) else { continue };
            let decay = p.value.ndim() >= 2;
            self.update(&p.name, p.value.data_mut(), g.data(), decay)?;
        }
        Ok(())
    }

    /// Apply one update to a flat parameter given its gradient.
    pub fn update(&mut self, name: &str, param: &mut [T], grad: &[T], decay: bool) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::InvalidCall(format!(
                "parameter {name} has {} values but its gradient has {}",
                param.len(),
                grad.len()
            )));
        }
        let slot = self.state.entry(name.to_string()).or_insert_with(|| Slot {
            first: vec![T::zero(); param.len()],
            second: vec![T::zero(); param.len()],
            steps: 0,
        });
        slot.steps += 1;
        match self.rule {
            UpdateRule::SgdMomentum { lr, momentum } => {
                let (lr, mu) = (T::of(lr), T::of(momentum));
                for ((p, &g), buf) in param.iter_mut().zip(grad).zip(slot.first.iter_mut()) {
                    *buf = if slot.steps == 1 { g } else { mu * *buf + g };
                    *p -= lr * *buf;
                }
            }
            UpdateRule::AdamW {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = slot.steps as i32;
                let bc1 = T::of(1.0 - beta1.powi(t));
                let bc2 = T::of(1.0 - beta2.powi(t));
                let (b1, b2) = (T::of(beta1), T::of(beta2));
                let (lr, eps) = (T::of(lr), T::of(eps));
                let shrink = T::one() - if decay { lr * T::of(weight_decay) } else { T::zero() };
                for (i, (p, &g)) in param.iter_mut().zip(grad).enumerate() {
                    let m = &mut slot.first[i];
                    let v = &mut slot.second[i];
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p * shrink - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
