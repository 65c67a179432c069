//! Adam with per-parameter step counts and checkpointable moments.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

const STEPS_META: &str = "optim.steps";

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.steps)
    }

    /// Updates every trainable, unfrozen parameter that received a gradient.
    /// Returns the number of parameters updated.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<usize> {
        let AdamConfig { beta1, beta2, eps } = self.config;
        let mut updated = 0;
        for (name, var) in store.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let s = match self.state.get_mut(name) {
                Some(s) => s,
                None => {
                    let zeros = var.as_tensor().zeros_like()?;
                    self.state.entry(name.to_string()).or_insert(Moments {
                        m: zeros.clone(),
                        v: zeros,
                        steps: 0,
                    })
                }
            };
            s.steps += 1;
            s.m = ((&s.m * beta1)? + (g * (1.0 - beta1))?)?;
            s.v = ((&s.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let t = s.steps as i32;
            let m_hat = (&s.m / (1.0 - beta1.powi(t)))?;
            let v_hat = (&s.v / (1.0 - beta2.powi(t)))?;
            let delta = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (delta * lr)?)?)?;
            updated += 1;
        }
        Ok(updated)
    }

    pub fn save_into(&self, ck: &mut Checkpoint) -> Result<()> {
        let mut steps = BTreeMap::new();
        for (name, s) in &self.state {
            ck.push_tensor(&format!("optim.m.{name}"), &s.m)?;
            ck.push_tensor(&format!("optim.v.{name}"), &s.v)?;
            steps.insert(name.clone(), s.steps);
        }
        ck.meta
            .insert(STEPS_META.into(), serde_json::to_string(&steps)?);
        ck.meta
            .insert("optim.config".into(), serde_json::to_string(&self.config)?);
        Ok(())
    }

    pub fn load_from(ck: &Checkpoint, store: &ParamStore) -> Result<Self> {
        let config = match ck.meta.get("optim.config") {
            Some(s) => serde_json::from_str(s)?,
            None => AdamConfig::default(),
        };
        let steps: BTreeMap<String, u64> = match ck.meta.get(STEPS_META) {
            Some(s) => serde_json::from_str(s)?,
            None => BTreeMap::new(),
        };
        let mut state = BTreeMap::new();
        for (name, n) in steps {
            let var = store.get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("optimizer state for unknown parameter `{name}`"))
            })?;
            let load = |kind: &str| -> Result<Tensor> {
                let key = format!("optim.{kind}.{name}");
                let a = ck
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer array `{key}`")))?;
                if a.shape != var.dims() {
                    return Err(Error::Checkpoint(format!("shape mismatch for `{key}`")));
                }
                a.to_tensor(store.dtype())
            };
            state.insert(
                name.clone(),
                Moments {
                    m: load("m")?,
                    v: load("v")?,
                    steps: n,
                },
            );
        }
        Ok(Self { config, state })
    }
}
