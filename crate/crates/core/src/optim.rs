//! Adaptive-moment (Adam) optimizer over named `Var`s with serializable state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every var that received a gradient.
    pub fn step<'a, I>(&mut self, vars: I, grads: &GradStore) -> Result<()>
    where
        I: IntoIterator<Item = (&'a String, &'a Var)>,
    {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, var) in vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let g = g.detach();
            let m = ((m * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            let v = ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let delta = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor().detach() - (delta * lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    /// Moment tensors keyed `<prefix><param>.m` / `<prefix><param>.v`.
    pub fn export_state(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.moments.len() * 2);
        for (name, (m, v)) in &self.moments {
            out.push((format!("{prefix}{name}.m"), m.clone()));
            out.push((format!("{prefix}{name}.v"), v.clone()));
        }
        out
    }

    pub fn import_state(
        &mut self,
        step: u64,
        prefix: &str,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.step = step;
        self.moments.clear();
        for (key, m) in tensors.range(prefix.to_string()..) {
            let Some(rest) = key.strip_prefix(prefix) else {
                break;
            };
            let Some(name) = rest.strip_suffix(".m") else {
                continue;
            };
            let v = tensors
                .get(&format!("{prefix}{name}.v"))
                .ok_or_else(|| Error::invalid(format!("optimizer state for `{name}` lacks `.v`")))?;
            self.moments.insert(name.to_string(), (m.clone(), v.clone()));
        }
        Ok(())
    }
}
