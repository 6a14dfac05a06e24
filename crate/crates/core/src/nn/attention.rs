use candle_core::Tensor;

use super::{softmax_last, LayerNorm, Linear, ParamStore};
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("hidden size {dim} not divisible by {heads} heads")));
        }
        let mut lin = |n: &str| Linear::new(store, &format!("{name}.{n}"), dim, dim, true, rng);
        Ok(Self {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            o: lin("o")?,
            heads,
            head_dim: dim / heads,
        })
    }

    /// `(B, S, D)` to `(B, H, S, D/H)`.
    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, s, _) = x.dims3()?;
        Ok(x.reshape((b, s, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Projected keys and values of `x`, already split into heads.
    pub fn project_kv(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((
            self.split_heads(&self.k.forward(x)?)?,
            self.split_heads(&self.v.forward(x)?)?,
        ))
    }

    /// Attends from `x` (B, Sq, D) to precomputed keys/values.
    pub fn attend(&self, x: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, s, d) = x.dims3()?;
        let q = self.split_heads(&self.q.forward(x)?)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? / (self.head_dim as f64).sqrt())?;
        if let Some(mask) = mask {
            scores = scores.broadcast_add(mask)?;
        }
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(v)?.transpose(1, 2)?.reshape((b, s, d))?;
        self.o.forward(&out)
    }

    pub fn forward(&self, x: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (k, v) = self.project_kv(kv)?;
        self.attend(x, &k, &v, mask)
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu()?)
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 2] {
        [&mut self.up, &mut self.down]
    }
}

/// Pre-norm transformer block; decoder blocks add cross-attention.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// Keys and values of already-decoded positions for one layer.
#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    kv: Option<(Tensor, Tensor)>,
}

impl TransformerLayer {
    fn build(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        cross: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let cross = if cross {
            Some((
                LayerNorm::new(store, &format!("{name}.ln_cross"), dim)?,
                MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads, rng)?,
            ))
        } else {
            None
        };
        Ok(Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads, rng)?,
            cross,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng)?,
        })
    }

    pub fn encoder(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ff_dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::build(store, name, dim, heads, ff_dim, false, rng)
    }

    pub fn decoder(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ff_dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::build(store, name, dim, heads, ff_dim, true, rng)
    }

    /// Cross-attention keys/values for a fixed memory.
    pub fn cross_kv(&self, memory: &Tensor) -> Result<Option<(Tensor, Tensor)>> {
        self.cross
            .as_ref()
            .map(|(_, attn)| attn.project_kv(memory))
            .transpose()
    }

    fn finish(&self, x: Tensor, cross_kv: Option<&(Tensor, Tensor)>) -> Result<Tensor> {
        let x = match (&self.cross, cross_kv) {
            (Some((ln, attn)), Some((k, v))) => (&x + attn.attend(&ln.forward(&x)?, k, v, None)?)?,
            (Some(_), None) => return Err(Error::InvalidInput("decoder layer needs memory".into())),
            _ => x,
        };
        Ok((&x + self.ff.forward(&self.ln_ff.forward(&x)?)?)?)
    }

    pub fn forward(&self, x: &Tensor, self_mask: Option<&Tensor>, memory: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln_self.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, self_mask)?)?;
        let cross_kv = match memory {
            Some(m) => self.cross_kv(m)?,
            None => None,
        };
        self.finish(x, cross_kv.as_ref())
    }

    /// Processes one new position `x` (B, 1, D), appending its keys and
    /// values to `cache`.
    pub fn forward_step(
        &self,
        x: &Tensor,
        cache: &mut LayerCache,
        cross_kv: Option<&(Tensor, Tensor)>,
    ) -> Result<Tensor> {
        let h = self.ln_self.forward(x)?;
        let (k_new, v_new) = self.self_attn.project_kv(&h)?;
        let (k, v) = match cache.kv.take() {
            Some((k, v)) => (Tensor::cat(&[&k, &k_new], 2)?, Tensor::cat(&[&v, &v_new], 2)?),
            None => (k_new, v_new),
        };
        let x = (x + self.self_attn.attend(&h, &k, &v, None)?)?;
        cache.kv = Some((k, v));
        self.finish(x, cross_kv)
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = self.self_attn.linears_mut().into_iter().collect();
        if let Some((_, attn)) = &mut self.cross {
            out.extend(attn.linears_mut());
        }
        out.extend(self.ff.linears_mut());
        out
    }
}

impl LayerCache {
    /// Keeps only the rows in `index` (beam reordering).
    pub fn select(&mut self, index: &Tensor) -> Result<()> {
        if let Some((k, v)) = self.kv.take() {
            self.kv = Some((k.index_select(index, 0)?, v.index_select(index, 0)?));
        }
        Ok(())
    }
}
