use candle_core::{DType, Tensor, Var};

use super::{xavier_std, ParamStore};
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Low-rank additive update `(alpha / rank) * B A` on a frozen weight.
/// `B` starts at zero, so a fresh adapter leaves the layer unchanged.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Var,
    pub b: Var,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn num_params(&self) -> usize {
        self.a.elem_count() + self.b.elem_count()
    }

    /// The dense update `(alpha / rank) * B A`, shaped like the weight.
    pub fn delta(&self) -> Result<Tensor> {
        Ok((self.b.as_tensor().matmul(self.a.as_tensor())? * self.scale())?)
    }
}

/// Affine map `y = x W^T + b` with an optional LoRA adapter.
#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    weight: Tensor,
    bias: Option<Tensor>,
    lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.normal(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            xavier_std(in_dim, out_dim),
            rng,
        )?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), &[out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_owned(),
            weight,
            bias,
            lora: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn lora(&self) -> Option<&LoraAdapter> {
        self.lora.as_ref()
    }

    /// Attaches a rank-`rank` adapter whose parameters live in `store`.
    pub fn attach_lora(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        alpha: f64,
        rng: &mut Rng,
    ) -> Result<&LoraAdapter> {
        let (d, k) = (self.out_dim(), self.in_dim());
        if rank == 0 || rank > d.min(k) {
            return Err(Error::InvalidInput(format!(
                "LoRA rank {rank} invalid for `{}` ({d}x{k})",
                self.name
            )));
        }
        let a_name = format!("{}.lora_a", self.name);
        let b_name = format!("{}.lora_b", self.name);
        store.normal(&a_name, &[rank, k], 1.0 / (k as f64).sqrt(), rng)?;
        store.constant(&b_name, &[d, rank], 0.0)?;
        let get = |n: &str| store.var(n).cloned().expect("just inserted");
        self.lora = Some(LoraAdapter {
            a: get(&a_name),
            b: get(&b_name),
            rank,
            alpha,
        });
        Ok(self.lora.as_ref().expect("set above"))
    }

    /// Folds the adapter into a plain layer with weight `W + (alpha/r) B A`.
    pub fn merged(&self) -> Result<Linear> {
        let weight = match &self.lora {
            Some(l) => (&self.weight + l.delta()?.to_dtype(self.weight.dtype())?)?,
            None => self.weight.clone(),
        };
        Ok(Linear {
            name: self.name.clone(),
            weight: weight.detach(),
            bias: self.bias.as_ref().map(Tensor::detach),
            lora: None,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims
            .last()
            .ok_or_else(|| Error::Shape("linear input must have rank >= 1".into()))?;
        if last != self.in_dim() {
            return Err(Error::Shape(format!(
                "`{}` expects last dim {}, got {last}",
                self.name,
                self.in_dim()
            )));
        }
        let flat = x.reshape(((), last))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        if let Some(l) = &self.lora {
            let low = flat.matmul(&l.a.as_tensor().t()?)?;
            y = (y + (low.matmul(&l.b.as_tensor().t()?)? * l.scale())?)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }

    pub fn dtype(&self) -> DType {
        self.weight.dtype()
    }
}
