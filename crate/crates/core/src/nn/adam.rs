//! Adam with externally visible moment buffers so that a run can be
//! checkpointed and resumed bit-for-bit.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    vars: Vec<(String, Var)>,
    moments: Vec<Moments>,
    step: u64,
}

impl Adam {
    pub fn new(params: &BTreeMap<String, Var>, config: AdamConfig) -> Result<Self> {
        let mut vars = Vec::with_capacity(params.len());
        let mut moments = Vec::with_capacity(params.len());
        for (name, var) in params {
            vars.push((name.clone(), var.clone()));
            moments.push(Moments {
                m: var.zeros_like()?,
                v: var.zeros_like()?,
            });
        }
        Ok(Self {
            config,
            vars,
            moments,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// (unused in the loss graph) keep their value and moments.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((_, var), mom) in self.vars.iter().zip(self.moments.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients can hold the backward graph; keep only the values.
            let g = g.detach();
            let m = (mom.m.affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?;
            let v = (mom.v.affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?;
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let v_hat = v.affine(1.0 / bc2, 0.0)?;
            let update = m_hat.div(&(v_hat.sqrt()? + eps)?)?.affine(lr, 0.0)?;
            var.set(&var.as_tensor().detach().sub(&update)?)?;
            mom.m = m;
            mom.v = v;
        }
        Ok(())
    }

    /// Moment buffers keyed `<prefix>.m.<param>` / `<prefix>.v.<param>`.
    pub fn state(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for ((name, _), mom) in self.vars.iter().zip(&self.moments) {
            out.insert(format!("{prefix}.m.{name}"), mom.m.clone());
            out.insert(format!("{prefix}.v.{name}"), mom.v.clone());
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        for ((name, var), mom) in self.vars.iter().zip(self.moments.iter_mut()) {
            let get = |kind: &str| -> Result<Tensor> {
                let key = format!("{prefix}.{kind}.{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{key}`")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer tensor `{key}` has wrong shape")));
                }
                Ok(t.to_dtype(var.dtype())?)
            };
            mom.m = get("m")?;
            mom.v = get("v")?;
        }
        self.step = step;
        Ok(())
    }
}
