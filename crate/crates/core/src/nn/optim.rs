//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 0.8e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct AdamW {
    cfg: AdamWConfig,
    slots: BTreeMap<String, Slot>,
    step: u64,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        let mut slots = BTreeMap::new();
        for (name, var) in vars {
            let m = var.zeros_like()?;
            let v = var.zeros_like()?;
            slots.insert(name, Slot { var, m, v });
        }
        Ok(Self { cfg, slots, step: 0 })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|s| s.as_str())
    }

    /// One update. Variables without a gradient (unused in the graph) still
    /// decay their moments and weights, matching the usual framework behaviour
    /// of treating a missing gradient as zero.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for slot in self.slots.values_mut() {
            let g = match grads.get(slot.var.as_tensor()) {
                Some(g) => g.clone(),
                None => slot.var.zeros_like()?,
            };
            let m = ((&slot.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&slot.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let w = slot.var.as_tensor();
            let next = ((w * (1.0 - c.lr * c.weight_decay))? - (update * c.lr)?)?;
            slot.var.set(&next)?;
            slot.m = m;
            slot.v = v;
        }
        Ok(())
    }

    /// Moment buffers keyed as `m/<name>` and `v/<name>` plus the step count.
    pub fn state(&self) -> (BTreeMap<String, Tensor>, u64) {
        let mut out = BTreeMap::new();
        for (name, s) in &self.slots {
            out.insert(format!("m/{name}"), s.m.clone());
            out.insert(format!("v/{name}"), s.v.clone());
        }
        (out, self.step)
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        for (name, s) in self.slots.iter_mut() {
            let m = state.get(&format!("m/{name}"));
            let v = state.get(&format!("v/{name}"));
            match (m, v) {
                (Some(m), Some(v)) if m.dims() == s.var.dims() && v.dims() == s.var.dims() => {
                    s.m = m.to_dtype(s.var.dtype())?;
                    s.v = v.to_dtype(s.var.dtype())?;
                }
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state for {name} missing or mis-shaped"
                    )))
                }
            }
        }
        self.step = step;
        Ok(())
    }
}
