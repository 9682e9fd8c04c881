//! Adam over the variables of a [`ParamStore`].

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{shape_err, Result};
use crate::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct Adam {
    lr: f64,
    step: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Result<Self> {
        let slots = store
            .vars()
            .map(|(name, var)| {
                Ok(Slot {
                    name: name.to_string(),
                    var: var.clone(),
                    m: var.as_tensor().zeros_like()?,
                    v: var.as_tensor().zeros_like()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { lr, step: 0, slots })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Gradients of `loss` for every managed variable (zeros where the loss
    /// does not depend on it).
    pub fn gradients(&self, loss: &Tensor) -> Result<Vec<Tensor>> {
        let grads: GradStore = loss.backward()?;
        self.slots
            .iter()
            .map(|s| match grads.get(s.var.as_tensor()) {
                // gradients carry their backward graph; keep only the values
                Some(g) => Ok(g.detach()),
                None => Ok(s.var.as_tensor().zeros_like()?),
            })
            .collect()
    }

    /// One update from per-variable gradients ordered like the store.
    pub fn apply(&mut self, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.slots.len() {
            return Err(shape_err!(
                "{} gradients for {} parameters",
                grads.len(),
                self.slots.len()
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (slot, g) in self.slots.iter_mut().zip(grads) {
            let g = g.detach();
            slot.m = ((&slot.m * BETA1)? + (&g * (1.0 - BETA1))?)?.detach();
            slot.v = ((&slot.v * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?.detach();
            let m_hat = (&slot.m / c1)?;
            let v_hat = (&slot.v / c2)?;
            let delta = (m_hat / (v_hat.sqrt()? + EPS)?)?;
            let next = (slot.var.as_tensor().detach() - (delta * self.lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }

    /// Moment tensors keyed `adam_m/<name>` and `adam_v/<name>`.
    pub fn state_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for s in &self.slots {
            out.insert(format!("adam_m/{}", s.name), s.m.clone());
            out.insert(format!("adam_v/{}", s.name), s.v.clone());
        }
        out
    }

    pub fn restore(&mut self, step: u64, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for s in &mut self.slots {
            for (prefix, dst) in [("adam_m", &mut s.m), ("adam_v", &mut s.v)] {
                let key = format!("{prefix}/{}", s.name);
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| shape_err!("optimizer state lacks `{key}`"))?;
                if t.dims() != s.var.as_tensor().dims() {
                    return Err(shape_err!("optimizer state `{key}` has shape {:?}", t.dims()));
                }
                *dst = t.to_dtype(s.var.as_tensor().dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}
