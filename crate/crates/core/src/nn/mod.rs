//! Minimal transformer building blocks on top of candle tensors.
//!
//! Fused candle kernels for softmax and layer norm do not propagate
//! gradients, so both are composed from differentiable primitives here.

mod attention;
mod linear;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use attention::{FeedForward, LayerCache, MultiHeadAttention, TransformerLayer};
pub use linear::{LoraAdapter, Linear};

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Large negative used for masked attention logits; exp() underflows to 0.
pub const MASK_VALUE: f64 = -1e9;

/// Named trainable parameters with a deterministic iteration order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, dims: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidInput(format!("parameter `{name}` registered twice")));
        }
        let t = Tensor::from_vec(values, dims, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.vars.insert(name.to_owned(), var);
        Ok(tensor)
    }

    pub fn normal(&mut self, name: &str, dims: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor> {
        let n = dims.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, values, dims)
    }

    pub fn constant(&mut self, name: &str, dims: &[usize], value: f64) -> Result<Tensor> {
        let n = dims.iter().product();
        self.insert(name, vec![value; n], dims)
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `tensors`; names must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::InvalidInput(format!("missing parameter `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: expected {:?}, found {:?}",
                    var.dims(),
                    src.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(Error::InvalidInput(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in var.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Rows scaled to unit L2 norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            bias: store.constant(&format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dim = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / dim)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / dim)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Fixed sinusoidal position table of shape `(len, dim)`.
pub fn sinusoidal_positions(len: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let mut values = vec![0f64; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            values[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::from_vec(values, (len, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Additive `(len, len)` mask hiding future positions.
pub fn causal_mask(len: usize, dtype: DType) -> Result<Tensor> {
    let values: Vec<f64> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j > i { MASK_VALUE } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(values, (len, len), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Additive `(batch, 1, 1, len)` mask hiding padding keys.
pub fn key_padding_mask(lengths: &[usize], len: usize, dtype: DType) -> Result<Tensor> {
    let values: Vec<f64> = lengths
        .iter()
        .flat_map(|&l| (0..len).map(move |j| if j >= l { MASK_VALUE } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(values, (lengths.len(), 1, 1, len), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f32, 2., 3.], [-1e9, 0., 0.]], &Device::Cpu).unwrap();
        let p = softmax_last(&x).unwrap().to_vec2::<f32>().unwrap();
        for row in &p {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(p[1][0], 0.0);
        let lp = log_softmax_last(&x).unwrap().exp().unwrap().to_vec2::<f32>().unwrap();
        assert!((lp[0][2] - p[0][2]).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_propagates_gradients() {
        let mut store = ParamStore::new(DType::F64);
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        let x = Var::new(&[[1f64, 2., 4., 8.]], &Device::Cpu).unwrap();
        let w = Tensor::new(&[[1f64, -1., 2., 0.5]], &Device::Cpu).unwrap();
        let loss = (ln.forward(x.as_tensor()).unwrap() * w).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(x.as_tensor()).expect("gradient through layer norm");
        assert!(g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() > 0.0);
    }

    #[test]
    fn store_round_trips_and_hashes() {
        let mut rng = Rng::seed_from_u64(0);
        let mut a = ParamStore::new(DType::F32);
        a.normal("w", &[3, 2], 1.0, &mut rng).unwrap();
        let mut b = ParamStore::new(DType::F32);
        b.constant("w", &[3, 2], 0.0).unwrap();
        assert_ne!(a.content_hash().unwrap(), b.content_hash().unwrap());
        let tensors = a.named_tensors().into_iter().collect();
        b.load(&tensors).unwrap();
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
        assert!(a.constant("w", &[1], 0.0).is_err());
    }
}
