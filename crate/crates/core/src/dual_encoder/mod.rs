//! Dual-encoder image-text scorer: two small transformer towers projecting
//! into a shared unit sphere, plus a learnable logit scale.

mod loss;
mod train;

use std::path::Path;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use rand::SeedableRng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

pub use loss::{clip_contrastive_loss, reward_score, scalar, similarity};
pub use train::{train_contrastive, ContrastiveConfig, EpochSampler};

use crate::checkpoint::{self, StageTag};
use crate::data::{SceneInstance, Vocabulary};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{
    key_padding_mask, l2_normalize, sinusoidal_positions, LayerNorm, Linear, ParamStore,
    TransformerLayer,
};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
    /// Dimension D of the joint embedding space.
    pub embed_dim: usize,
    pub init_logit_scale: f64,
    pub max_logit_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            layers: 2,
            ff_mult: 4,
            embed_dim: 64,
            init_logit_scale: 1.0 / 0.07,
            max_logit_scale: 100.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config("encoder hidden must be a positive multiple of heads".into()));
        }
        if self.layers == 0 || self.embed_dim == 0 || self.ff_mult == 0 {
            return Err(Error::Config("encoder layers, ff_mult and embed_dim must be positive".into()));
        }
        if !(self.init_logit_scale > 0.0) || self.init_logit_scale > self.max_logit_scale {
            return Err(Error::Config("logit scale must satisfy 0 < init <= max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub num_slots: usize,
    pub feature_dim: usize,
    /// Texts are padded to this many tokens (BOS plus words).
    pub max_text_len: usize,
}

impl EncoderShape {
    pub fn hash(&self) -> String {
        io::value_hash(self).expect("shape serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0 }
    }
}

/// Unit-norm embeddings, one row per input.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix(Tensor);

impl EmbeddingMatrix {
    pub fn new(t: Tensor) -> Self {
        Self(t)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn rows(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.0.to_dtype(DType::F32)?.to_vec2::<f32>()?)
    }
}

/// Cosine similarities; rows index the first argument of [`similarity`].
#[derive(Debug, Clone)]
pub struct SimilarityMatrix(pub(crate) Tensor);

impl SimilarityMatrix {
    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn shape(&self) -> Result<(usize, usize)> {
        Ok(self.0.dims2()?)
    }

    pub fn to_vec2(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.0.to_dtype(DType::F32)?.to_vec2::<f32>()?)
    }

    pub fn transpose(&self) -> Result<Self> {
        Ok(Self(self.0.t()?.contiguous()?))
    }
}

#[derive(Debug, Clone)]
struct Tower {
    input: Linear,
    layers: Vec<TransformerLayer>,
    ln: LayerNorm,
    output: Linear,
}

impl Tower {
    fn new(store: &mut ParamStore, name: &str, input_dim: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let h = cfg.hidden;
        Ok(Self {
            input: Linear::new(store, &format!("{name}.input"), input_dim, h, true, rng)?,
            layers: (0..cfg.layers)
                .map(|i| TransformerLayer::encoder(store, &format!("{name}.{i}"), h, cfg.heads, h * cfg.ff_mult, rng))
                .collect::<Result<_>>()?,
            ln: LayerNorm::new(store, &format!("{name}.ln"), h)?,
            output: Linear::new(store, &format!("{name}.output"), h, cfg.embed_dim, false, rng)?,
        })
    }

    /// `x` is `(B, S, input_dim)` after embedding; `weights` is `(B, S)`
    /// with 1 on real positions, used for masked mean pooling.
    fn forward(&self, x: &Tensor, positions: &Tensor, mask: Option<&Tensor>, weights: &Tensor) -> Result<Tensor> {
        let s = x.dim(1)?;
        let mut h = self.input.forward(x)?.broadcast_add(&positions.i(..s)?)?;
        for layer in &self.layers {
            h = layer.forward(&h, mask, None)?;
        }
        let h = self.ln.forward(&h)?;
        let count = weights.sum_keepdim(1)?;
        let pooled = h
            .broadcast_mul(&weights.unsqueeze(D::Minus1)?)?
            .sum(1)?
            .broadcast_div(&count)?;
        l2_normalize(&self.output.forward(&pooled)?)
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = vec![&mut self.input];
        for l in &mut self.layers {
            out.extend(l.linears_mut());
        }
        out.push(&mut self.output);
        out
    }
}

#[derive(Debug, Clone)]
pub struct DualEncoder {
    shape: EncoderShape,
    base: ParamStore,
    adapters: ParamStore,
    scale_store: ParamStore,
    image: Tower,
    text: Tower,
    token_embedding: Tensor,
    log_logit_scale: Tensor,
    positions: Tensor,
    lora: Option<LoraConfig>,
    lora_targets: Vec<String>,
}

impl DualEncoder {
    pub fn new(shape: EncoderShape, seed: u64) -> Result<Self> {
        shape.config.validate()?;
        let cfg = shape.config.clone();
        let mut rng = Rng::seed_from_u64(seed);
        let mut base = ParamStore::new(DType::F32);
        let image = Tower::new(&mut base, "image", shape.feature_dim, &cfg, &mut rng)?;
        let token_embedding = base.normal("text.embed", &[shape.vocab_size, cfg.hidden], 1.0, &mut rng)?;
        let text = Tower::new(&mut base, "text", cfg.hidden, &cfg, &mut rng)?;
        let mut scale_store = ParamStore::new(DType::F32);
        let log_logit_scale = scale_store.constant("log_logit_scale", &[], cfg.init_logit_scale.ln())?;
        let positions = sinusoidal_positions(shape.num_slots.max(shape.max_text_len), cfg.hidden, DType::F32)?;
        Ok(Self {
            shape,
            base,
            adapters: ParamStore::new(DType::F32),
            scale_store,
            image,
            text,
            token_embedding,
            log_logit_scale,
            positions,
            lora: None,
            lora_targets: Vec::new(),
        })
    }

    /// Copy that shares no parameter storage with `self`. (`clone` shares
    /// it, so training a clone also trains the original.)
    pub fn detached_copy(&self) -> Result<Self> {
        let mut out = Self::new(self.shape.clone(), 0)?;
        if let Some(l) = self.lora {
            let targets: Vec<&str> = self.lora_targets.iter().map(String::as_str).collect();
            out.inject_lora(l, &targets, 0)?;
        }
        out.base.load(&self.base.named_tensors().into_iter().collect())?;
        out.adapters.load(&self.adapters.named_tensors().into_iter().collect())?;
        out.scale_store.load(&self.scale_store.named_tensors().into_iter().collect())?;
        Ok(out)
    }

    pub fn shape(&self) -> &EncoderShape {
        &self.shape
    }

    pub fn config_hash(&self) -> String {
        self.shape.hash()
    }

    pub fn base_params(&self) -> &ParamStore {
        &self.base
    }

    pub fn adapter_params(&self) -> &ParamStore {
        &self.adapters
    }

    pub fn scale_params(&self) -> &ParamStore {
        &self.scale_store
    }

    pub fn lora(&self) -> Option<LoraConfig> {
        self.lora
    }

    pub fn logit_scale(&self) -> Result<Tensor> {
        Ok(self.log_logit_scale.exp()?)
    }

    pub fn logit_scale_value(&self) -> Result<f64> {
        Ok(self.logit_scale()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    /// Projects the learnable scale back into `(0, max_logit_scale]`.
    pub fn clamp_logit_scale(&self) -> Result<()> {
        let var = self.scale_store.var("log_logit_scale").expect("registered in new");
        let max = self.shape.config.max_logit_scale.ln();
        let current = var.as_tensor().to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if current > max {
            var.set(&scalar(max, DType::F32)?)?;
        }
        Ok(())
    }

    pub fn embed_images(&self, features: &Tensor) -> Result<EmbeddingMatrix> {
        let (b, r, f) = features.dims3()?;
        if b == 0 {
            return Err(Error::InvalidInput("embed_images needs at least one scene".into()));
        }
        if r != self.shape.num_slots || f != self.shape.feature_dim {
            return Err(Error::Shape(format!(
                "features {r}x{f}, encoder expects {}x{}",
                self.shape.num_slots, self.shape.feature_dim
            )));
        }
        let weights = Tensor::ones((b, r), DType::F32, &Device::Cpu)?;
        Ok(EmbeddingMatrix(self.image.forward(features, &self.positions, None, &weights)?))
    }

    pub fn embed_scenes(&self, scenes: &[&SceneInstance]) -> Result<EmbeddingMatrix> {
        let (r, f) = (self.shape.num_slots, self.shape.feature_dim);
        let mut values = Vec::with_capacity(scenes.len() * r * f);
        for s in scenes {
            if s.features.values.len() != r * f {
                return Err(Error::Shape(format!("scene {} feature size mismatch", s.id)));
            }
            values.extend_from_slice(&s.features.values);
        }
        self.embed_images(&Tensor::from_vec(values, (scenes.len(), r, f), &Device::Cpu)?)
    }

    /// Embeds captions given as id sequences; sentinels are stripped and a
    /// single BOS is prepended. Batches are padded to their longest caption,
    /// which must fit `max_text_len`.
    pub fn embed_texts(&self, captions: &[&[u32]]) -> Result<EmbeddingMatrix> {
        let longest = captions
            .iter()
            .map(|c| 1 + c.iter().filter(|&&t| !Vocabulary::is_sentinel(t)).count())
            .max()
            .unwrap_or(1);
        if longest > self.shape.max_text_len {
            return Err(Error::Shape(format!(
                "caption of {longest} tokens exceeds max_text_len {}",
                self.shape.max_text_len
            )));
        }
        self.embed_texts_padded(captions, longest)
    }

    pub fn embed_texts_padded(&self, captions: &[&[u32]], pad_len: usize) -> Result<EmbeddingMatrix> {
        if captions.is_empty() {
            return Err(Error::InvalidInput("embed_texts needs at least one caption".into()));
        }
        if pad_len > self.positions.dim(0)? {
            return Err(Error::Shape(format!("pad length {pad_len} exceeds position table")));
        }
        let n = captions.len();
        let mut ids = vec![Vocabulary::PAD_ID; n * pad_len];
        let mut weights = vec![0f32; n * pad_len];
        let mut lengths = Vec::with_capacity(n);
        for (i, c) in captions.iter().enumerate() {
            let content: Vec<u32> = std::iter::once(Vocabulary::BOS_ID)
                .chain(c.iter().copied().filter(|&t| !Vocabulary::is_sentinel(t)))
                .collect();
            if content.len() > pad_len {
                return Err(Error::Shape(format!(
                    "caption of {} tokens exceeds pad length {pad_len}",
                    content.len()
                )));
            }
            if let Some(bad) = content.iter().find(|&&t| t as usize >= self.shape.vocab_size) {
                return Err(Error::InvalidInput(format!("token {bad} outside vocabulary")));
            }
            for (t, &tok) in content.iter().enumerate() {
                ids[i * pad_len + t] = tok;
                weights[i * pad_len + t] = 1.0;
            }
            lengths.push(content.len());
        }
        let dev = Device::Cpu;
        let ids = Tensor::from_vec(ids, n * pad_len, &dev)?;
        let x = self
            .token_embedding
            .index_select(&ids, 0)?
            .reshape((n, pad_len, self.shape.config.hidden))?;
        let weights = Tensor::from_vec(weights, (n, pad_len), &dev)?;
        let mask = key_padding_mask(&lengths, pad_len, DType::F32)?;
        Ok(EmbeddingMatrix(self.text.forward(&x, &self.positions, Some(&mask), &weights)?))
    }

    /// Cosine similarity of each (scene, caption) pair.
    pub fn pair_similarities(&self, scenes: &[&SceneInstance], captions: &[&[u32]]) -> Result<Vec<f64>> {
        if scenes.len() != captions.len() {
            return Err(Error::Shape(format!(
                "{} scenes for {} captions",
                scenes.len(),
                captions.len()
            )));
        }
        let v = self.embed_scenes(scenes)?;
        let t = self.embed_texts(captions)?;
        let sims = (t.as_tensor() * v.as_tensor())?.sum(1)?;
        Ok(sims.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// `w * max(0, cos)` for each (scene, caption) pair.
    pub fn reward_scores(&self, scenes: &[&SceneInstance], captions: &[&[u32]], w: f64) -> Result<Vec<f64>> {
        Ok(self
            .pair_similarities(scenes, captions)?
            .into_iter()
            .map(|s| reward_score(s, w))
            .collect())
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = self.image.linears_mut();
        out.extend(self.text.linears_mut());
        out
    }

    /// Names of every adaptable linear map.
    pub fn linear_names(&mut self) -> Vec<String> {
        self.linears_mut().into_iter().map(|l| l.name().to_owned()).collect()
    }

    /// Attaches LoRA adapters to every linear map whose name contains one of
    /// `targets` (all maps when `targets` is empty). Base weights stay
    /// frozen; afterwards only adapters and the logit scale are trainable.
    pub fn inject_lora(&mut self, lora: LoraConfig, targets: &[&str], seed: u64) -> Result<usize> {
        if self.lora.is_some() {
            return Err(Error::InvalidInput("LoRA adapters already injected".into()));
        }
        if lora.rank == 0 {
            return Err(Error::InvalidInput("LoRA rank must be at least 1".into()));
        }
        let mut selected: Vec<usize> = Vec::new();
        {
            let linears = self.linears_mut();
            for (i, l) in linears.iter().enumerate() {
                if targets.is_empty() || targets.iter().any(|t| l.name().contains(t)) {
                    let max = l.in_dim().min(l.out_dim());
                    if lora.rank > max {
                        return Err(Error::InvalidInput(format!(
                            "LoRA rank {} exceeds min dimension {max} of `{}`",
                            lora.rank,
                            l.name()
                        )));
                    }
                    selected.push(i);
                }
            }
        }
        let mut rng = Rng::seed_from_u64(seed);
        let mut adapters = ParamStore::new(DType::F32);
        {
            let mut linears = self.linears_mut();
            for &i in &selected {
                linears[i].attach_lora(&mut adapters, lora.rank, lora.alpha, &mut rng)?;
            }
        }
        self.adapters = adapters;
        self.lora = Some(lora);
        self.lora_targets = targets.iter().map(|t| (*t).to_owned()).collect();
        Ok(selected.len())
    }

    /// Copy with every adapter folded into its base weight.
    pub fn merged(&self) -> Result<DualEncoder> {
        let mut out = self.clone();
        for l in out.linears_mut() {
            *l = l.merged()?;
        }
        out.adapters = ParamStore::new(DType::F32);
        out.lora = None;
        out.lora_targets.clear();
        Ok(out)
    }

    /// Parameters updated during contrastive training: everything before
    /// LoRA injection, only adapters and the logit scale afterwards.
    pub fn trainable(&self) -> Vec<(String, candle_core::Var)> {
        let mut out: Vec<_> = if self.lora.is_some() {
            self.adapters
                .named_vars()
                .into_iter()
                .map(|(k, v)| (format!("lora.{k}"), v))
                .collect()
        } else {
            self.base
                .named_vars()
                .into_iter()
                .map(|(k, v)| (format!("base.{k}"), v))
                .collect()
        };
        out.extend(
            self.scale_store
                .named_vars()
                .into_iter()
                .map(|(k, v)| (format!("scale.{k}"), v)),
        );
        out
    }

    pub fn save(&self, path: &Path, stage: StageTag, mut meta: serde_json::Value) -> Result<String> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (prefix, store) in [("base", &self.base), ("lora", &self.adapters), ("scale", &self.scale_store)] {
            tensors.extend(store.named_tensors().into_iter().map(|(k, t)| (format!("{prefix}.{k}"), t)));
        }
        meta["lora"] = serde_json::to_value(self.lora)?;
        meta["lora_targets"] = serde_json::to_value(&self.lora_targets)?;
        meta["shape"] = serde_json::to_value(&self.shape)?;
        checkpoint::save(path, &self.config_hash(), stage, meta, &tensors)
    }

    /// Restores an encoder saved with [`DualEncoder::save`]; the checkpoint
    /// must match `shape`.
    pub fn load(path: &Path, shape: &EncoderShape) -> Result<(Self, checkpoint::CheckpointHeader)> {
        let ck = checkpoint::load(path, Some(&shape.hash()))?;
        let lora: Option<LoraConfig> = serde_json::from_value(ck.header.meta["lora"].clone())?;
        let targets: Vec<String> =
            serde_json::from_value(ck.header.meta["lora_targets"].clone()).unwrap_or_default();
        let targets: Vec<&str> = targets.iter().map(String::as_str).collect();
        let mut model = Self::new(shape.clone(), 0)?;
        if let Some(l) = lora {
            model.inject_lora(l, &targets, 0)?;
        }
        model.base.load(&ck.group("base"))?;
        model.adapters.load(&ck.group("lora"))?;
        model.scale_store.load(&ck.group("scale"))?;
        Ok((model, ck.header))
    }
}
