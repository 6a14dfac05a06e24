//! Adam with optional decoupled weight decay and global-norm clipping.
//!
//! Kept in-tree (rather than using a library optimizer) so the moment
//! estimates can be checkpointed, which bitwise-exact resumption needs.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay; 0 gives plain Adam.
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: usize,
    cfg: AdamConfig,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        let zeros = |p: &Var| p.as_tensor().zeros_like();
        let m = params.iter().map(|(_, p)| zeros(p)).collect::<candle_core::Result<_>>()?;
        let v = params.iter().map(|(_, p)| zeros(p)).collect::<candle_core::Result<_>>()?;
        Ok(Self {
            params,
            m,
            v,
            steps: 0,
            cfg,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Backpropagates `loss` and applies one update at learning rate `lr`.
    /// Returns the pre-clipping global gradient norm.
    pub fn backward_step(&mut self, loss: &Tensor, lr: f64) -> Result<f64> {
        let grads = loss.backward()?;
        self.step(&grads, lr)
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<f64> {
        let mut sq = 0f64;
        let mut found: Vec<Option<Tensor>> = Vec::with_capacity(self.params.len());
        for (_, p) in &self.params {
            let g = grads.get(p.as_tensor()).cloned();
            if let Some(g) = &g {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
            found.push(g);
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step: self.steps,
                detail: format!("non-finite gradient norm {norm}"),
            });
        }
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, g) in found.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let g = if clip < 1.0 { (g * clip)? } else { g };
            let p = &self.params[i].1;
            let m = ((&self.m[i] * b1)? + (&g * (1.0 - b1))?)?;
            let v = ((&self.v[i] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.cfg.eps)?)?;
            let mut next = (p.as_tensor() - (update * lr)?)?;
            if self.cfg.weight_decay > 0.0 {
                next = (next - (p.as_tensor() * (lr * self.cfg.weight_decay))?)?;
            }
            p.set(&next)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(norm)
    }

    /// First/second moments keyed `m.<param>` / `v.<param>`.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.params.len() * 2);
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.push((format!("m.{name}"), self.m[i].clone()));
            out.push((format!("v.{name}"), self.v[i].clone()));
        }
        out
    }

    pub fn load_state(&mut self, steps: usize, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for (i, (name, _)) in self.params.iter().enumerate() {
            let get = |k: String| {
                state
                    .get(&k)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("optimizer state lacks `{k}`")))
            };
            self.m[i] = get(format!("m.{name}"))?;
            self.v[i] = get(format!("v.{name}"))?;
        }
        self.steps = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use candle_core::Device;

    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::new(&[3f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], AdamConfig::default()).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss, 0.05).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let x = Var::new(&[1f64, 2.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], AdamConfig::default()).unwrap();
        let loss = (x.as_tensor() * 0.0).unwrap().sum_all().unwrap();
        opt.backward_step(&loss, 0.1).unwrap();
        assert_eq!(x.as_tensor().to_vec1::<f64>().unwrap(), vec![1.0, 2.0]);
    }
}
