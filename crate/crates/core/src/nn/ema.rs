//! Exponential moving average of a parameter subset.

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone)]
pub struct Ema {
    decay: f64,
    prefixes: Vec<String>,
    shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    /// Shadows every variable under any of `prefixes`, starting from the current values.
    pub fn new(store: &ParamStore, prefixes: &[&str], decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::config(format!("ema decay {decay} outside [0, 1]")));
        }
        let mut shadow = BTreeMap::new();
        for p in prefixes {
            shadow.extend(store.snapshot(p));
        }
        Ok(Self {
            decay,
            prefixes: prefixes.iter().map(|s| s.to_string()).collect(),
            shadow,
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn prefixes(&self) -> &[String] {
        &self.prefixes
    }

    pub fn shadow(&self) -> &BTreeMap<String, Tensor> {
        &self.shadow
    }

    pub fn set_shadow(&mut self, shadow: BTreeMap<String, Tensor>) -> Result<()> {
        if shadow.keys().ne(self.shadow.keys()) {
            return Err(Error::Checkpoint("ema registry mismatch".into()));
        }
        self.shadow = shadow;
        Ok(())
    }

    pub fn update(&mut self, store: &ParamStore) -> Result<()> {
        let mut params = Vec::new();
        for p in &self.prefixes {
            params.extend(store.vars(p));
        }
        let params: BTreeMap<String, Var> = params.into_iter().collect();
        ema_update(&mut self.shadow, &params, self.decay)
    }
}

/// `shadow <- decay * shadow + (1 - decay) * param` for every entry.
pub fn ema_update(
    shadow: &mut BTreeMap<String, Tensor>,
    params: &BTreeMap<String, Var>,
    decay: f64,
) -> Result<()> {
    if shadow.len() != params.len() || shadow.keys().ne(params.keys()) {
        return Err(Error::config("ema registry mismatch"));
    }
    for (name, s) in shadow.iter_mut() {
        let p = params[name].as_detached_tensor();
        if p.dims() != s.dims() {
            return Err(Error::shape(format!("ema shape mismatch for {name}")));
        }
        *s = ((&*s * decay)? + (p * (1.0 - decay))?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn one(v: f64) -> (BTreeMap<String, Tensor>, BTreeMap<String, Var>) {
        let mut s = BTreeMap::new();
        s.insert("a".to_string(), Tensor::new(&[1.0f64], &Device::Cpu).unwrap());
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), Var::new(&[v], &Device::Cpu).unwrap());
        (s, p)
    }

    #[test]
    fn decay_extremes_and_default() {
        for (decay, expect) in [(0.0, 0.0), (1.0, 1.0), (0.995, 0.995)] {
            let (mut s, p) = one(0.0);
            ema_update(&mut s, &p, decay).unwrap();
            let got = s["a"].to_vec1::<f64>().unwrap()[0];
            assert!((got - expect).abs() < 1e-15, "{decay}: {got}");
        }
    }

    #[test]
    fn registry_mismatch_is_rejected() {
        let (mut s, _) = one(0.0);
        let mut p = BTreeMap::new();
        p.insert("b".to_string(), Var::new(&[0.0f64], &Device::Cpu).unwrap());
        assert!(ema_update(&mut s, &p, 0.5).is_err());
    }
}
