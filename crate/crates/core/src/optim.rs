//! First-order optimizers with checkpointable state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::Result;
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.015,
            momentum: 0.0,
        }
    }
}

/// Plain (optionally heavy-ball) stochastic gradient descent.
#[derive(Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every variable of `params` that has a gradient in `grads`.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry their own tape; keeping it alive in optimizer
            // state would chain every step's graph together.
            let g = &g.detach();
            let dir = if self.config.momentum > 0.0 {
                let v = match self.velocity.get(&name) {
                    Some(v) => ((v * self.config.momentum)? + g)?,
                    None => g.copy()?,
                };
                self.velocity.insert(name, v.clone());
                v
            } else {
                g.clone()
            };
            var.set(&(var.as_tensor().detach() - (dir * self.config.lr)?)?)?;
        }
        Ok(())
    }

    pub fn save_into(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        for (name, v) in &self.velocity {
            archive.put_tensor(format!("{prefix}velocity.{name}"), v)?;
        }
        Ok(())
    }

    pub fn load_from(&mut self, archive: &Archive, prefix: &str, params: &ParamStore) -> Result<()> {
        self.velocity.clear();
        for name in params.names() {
            let key = format!("{prefix}velocity.{name}");
            if archive.contains(&key) {
                let t = archive.get_tensor(&key, params.dtype(), params.device())?;
                self.velocity.insert(name, t);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = &g.detach();
            let m = match self.first.get(&name) {
                Some(m) => ((m * c.beta1)? + (g * (1.0 - c.beta1))?)?,
                None => (g * (1.0 - c.beta1))?,
            };
            let v = match self.second.get(&name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * c.lr)?)?)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name, v);
        }
        Ok(())
    }

    pub fn save_into(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        archive.put_json(format!("{prefix}t"), &self.t)?;
        for (name, m) in &self.first {
            archive.put_tensor(format!("{prefix}m.{name}"), m)?;
        }
        for (name, v) in &self.second {
            archive.put_tensor(format!("{prefix}v.{name}"), v)?;
        }
        Ok(())
    }

    pub fn load_from(&mut self, archive: &Archive, prefix: &str, params: &ParamStore) -> Result<()> {
        self.t = archive.get_json(&format!("{prefix}t"))?;
        self.first.clear();
        self.second.clear();
        for name in params.names() {
            let (mk, vk) = (format!("{prefix}m.{name}"), format!("{prefix}v.{name}"));
            if archive.contains(&mk) {
                self.first.insert(
                    name.clone(),
                    archive.get_tensor(&mk, params.dtype(), params.device())?,
                );
                self.second
                    .insert(name, archive.get_tensor(&vk, params.dtype(), params.device())?);
            }
        }
        Ok(())
    }
}
