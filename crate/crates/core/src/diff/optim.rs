use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diff::float::{lit, Float};
use crate::diff::params::ParameterStore;
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("Adam eps must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step_count: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamState { config, step_count: 0, first: BTreeMap::new(), second: BTreeMap::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. Parameters absent from `grads` are treated as
    /// having zero gradient.
    pub fn step(&mut self, params: &mut ParameterStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.config.validate()?;
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name:?}")))?;
            if p.shape() != g.shape() {
                return Err(Error::contract(format!("gradient shape mismatch for {name:?}")));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient"));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.config;
        let (b1, b2, lr, eps): (T, T, T, T) = (lit(c.beta1), lit(c.beta2), lit(c.lr), lit(c.eps));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let p = params.get_mut(&name).expect("listed above");
            let n = p.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let g = grads.get(&name).map(Tensor::data);
            for i in 0..n {
                let gi = g.map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
