//! Encoder-decoder transformer captioner with cached incremental decoding.

mod decode;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use rand::SeedableRng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

pub use decode::{beam_search, caption_scenes, greedy, sample_sequences, DecodeResult};

use std::path::Path;

use crate::checkpoint::{self, CheckpointHeader, StageTag};
use crate::data::{SceneInstance, Vocabulary};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{
    causal_mask, log_softmax_last, sinusoidal_positions, LayerCache, LayerNorm, Linear,
    ParamStore, TransformerLayer, MASK_VALUE,
};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionerConfig {
    pub hidden: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Feed-forward width as a multiple of `hidden`.
    pub ff_mult: usize,
    pub positional_encoding: bool,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 8,
            encoder_layers: 3,
            decoder_layers: 3,
            ff_mult: 4,
            positional_encoding: true,
        }
    }
}

impl CaptionerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "captioner hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.ff_mult == 0 {
            return Err(Error::Config("captioner layer counts must be positive".into()));
        }
        Ok(())
    }
}

/// Everything that fixes a captioner's parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionerShape {
    pub config: CaptionerConfig,
    pub vocab_size: usize,
    pub num_slots: usize,
    pub feature_dim: usize,
    pub max_len: usize,
}

impl CaptionerShape {
    pub fn hash(&self) -> String {
        io::value_hash(self).expect("shape serializes")
    }
}

#[derive(Debug, Clone)]
pub struct Captioner {
    shape: CaptionerShape,
    store: ParamStore,
    feature_proj: Linear,
    encoder: Vec<TransformerLayer>,
    encoder_ln: LayerNorm,
    token_embedding: Tensor,
    decoder: Vec<TransformerLayer>,
    decoder_ln: LayerNorm,
    head: Linear,
    positions: Tensor,
    output_mask: Tensor,
}

/// Per-layer caches for step-by-step decoding of a batch of rows.
#[derive(Debug, Clone)]
pub struct DecodeState {
    caches: Vec<LayerCache>,
    cross: Vec<(Tensor, Tensor)>,
    position: usize,
    rows: usize,
}

impl DecodeState {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Reorders (and possibly duplicates) rows; cross-attention state is
    /// reordered as well so rows may move between scenes.
    pub fn select(&mut self, index: &[u32]) -> Result<()> {
        let idx = Tensor::new(index, &Device::Cpu)?;
        for c in &mut self.caches {
            c.select(&idx)?;
        }
        for (k, v) in &mut self.cross {
            *k = k.index_select(&idx, 0)?;
            *v = v.index_select(&idx, 0)?;
        }
        self.rows = index.len();
        Ok(())
    }
}

impl Captioner {
    pub fn new(shape: CaptionerShape, seed: u64) -> Result<Self> {
        shape.config.validate()?;
        if shape.vocab_size <= Vocabulary::EOS_ID as usize + 1 {
            return Err(Error::Config("vocabulary has no word tokens".into()));
        }
        let cfg = &shape.config;
        let mut rng = Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(DType::F32);
        let h = cfg.hidden;
        let ff = h * cfg.ff_mult;
        let feature_proj = Linear::new(&mut store, "enc.proj", shape.feature_dim, h, true, &mut rng)?;
        let encoder = (0..cfg.encoder_layers)
            .map(|i| TransformerLayer::encoder(&mut store, &format!("enc.{i}"), h, cfg.heads, ff, &mut rng))
            .collect::<Result<_>>()?;
        let encoder_ln = LayerNorm::new(&mut store, "enc.ln", h)?;
        let token_embedding = store.normal("dec.embed", &[shape.vocab_size, h], 0.5, &mut rng)?;
        let decoder = (0..cfg.decoder_layers)
            .map(|i| TransformerLayer::decoder(&mut store, &format!("dec.{i}"), h, cfg.heads, ff, &mut rng))
            .collect::<Result<_>>()?;
        let decoder_ln = LayerNorm::new(&mut store, "dec.ln", h)?;
        let head = Linear::new(&mut store, "dec.head", h, shape.vocab_size, true, &mut rng)?;
        let positions = sinusoidal_positions(shape.num_slots.max(shape.max_len + 1), h, DType::F32)?;
        let mut mask = vec![0f32; shape.vocab_size];
        mask[Vocabulary::PAD_ID as usize] = MASK_VALUE as f32;
        mask[Vocabulary::BOS_ID as usize] = MASK_VALUE as f32;
        let output_mask = Tensor::from_vec(mask, shape.vocab_size, &Device::Cpu)?;
        Ok(Self {
            shape,
            store,
            feature_proj,
            encoder,
            encoder_ln,
            token_embedding,
            decoder,
            decoder_ln,
            head,
            positions,
            output_mask,
        })
    }

    pub fn shape(&self) -> &CaptionerShape {
        &self.shape
    }

    pub fn config_hash(&self) -> String {
        self.shape.hash()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn save(&self, path: &Path, stage: StageTag, mut meta: serde_json::Value) -> Result<String> {
        meta["shape"] = serde_json::to_value(&self.shape)?;
        checkpoint::save(path, &self.config_hash(), stage, meta, &self.store.named_tensors())
    }

    /// Restores a captioner saved with [`Captioner::save`]; the checkpoint
    /// must match `shape`.
    pub fn load(path: &Path, shape: &CaptionerShape) -> Result<(Self, CheckpointHeader)> {
        let ck = checkpoint::load(path, Some(&shape.hash()))?;
        let model = Self::new(shape.clone(), 0)?;
        model.store.load(&ck.tensors)?;
        Ok((model, ck.header))
    }

    pub fn vocab_size(&self) -> usize {
        self.shape.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.shape.max_len
    }

    /// Stacks scene features into a `(B, R, F)` tensor.
    pub fn features_tensor(&self, scenes: &[&SceneInstance]) -> Result<Tensor> {
        let (r, f) = (self.shape.num_slots, self.shape.feature_dim);
        let mut values = Vec::with_capacity(scenes.len() * r * f);
        for s in scenes {
            if s.features.slots != r || s.features.dim != f {
                return Err(Error::Shape(format!(
                    "scene {} has features {}x{}, captioner expects {r}x{f}",
                    s.id, s.features.slots, s.features.dim
                )));
            }
            values.extend_from_slice(&s.features.values);
        }
        Ok(Tensor::from_vec(values, (scenes.len(), r, f), &Device::Cpu)?)
    }

    /// Encodes `(B, R, F)` features into a `(B, R, H)` memory.
    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        let (_, r, f) = features.dims3()?;
        if r != self.shape.num_slots || f != self.shape.feature_dim {
            return Err(Error::Shape(format!(
                "features {r}x{f}, expected {}x{}",
                self.shape.num_slots, self.shape.feature_dim
            )));
        }
        let mut x = self.feature_proj.forward(features)?;
        if self.shape.config.positional_encoding {
            x = x.broadcast_add(&self.positions.i(..r)?)?;
        }
        for layer in &self.encoder {
            x = layer.forward(&x, None, None)?;
        }
        self.encoder_ln.forward(&x)
    }

    pub fn encode_scenes(&self, scenes: &[&SceneInstance]) -> Result<Tensor> {
        self.encode(&self.features_tensor(scenes)?)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= self.shape.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token {bad} outside vocabulary of size {}",
                self.shape.vocab_size
            )));
        }
        Ok(())
    }

    /// Teacher-forced next-token logits `(B, S, V)` for input tokens `(B, S)`.
    pub fn logits(&self, memory: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let (b, s) = tokens.dims2()?;
        if s > self.positions.dim(0)? {
            return Err(Error::Shape(format!("sequence of {s} tokens exceeds position table")));
        }
        let emb = self
            .token_embedding
            .index_select(&tokens.flatten_all()?, 0)?
            .reshape((b, s, self.shape.config.hidden))?;
        let mut x = emb.broadcast_add(&self.positions.i(..s)?)?;
        let mask = causal_mask(s, DType::F32)?;
        for layer in &self.decoder {
            x = layer.forward(&x, Some(&mask), Some(memory))?;
        }
        let x = self.decoder_ln.forward(&x)?;
        Ok(self.head.forward(&x)?.broadcast_add(&self.output_mask)?)
    }

    /// Next-token distribution after `prefix`, recomputed from scratch.
    pub fn step_distribution(&self, memory: &Tensor, prefix: &[u32]) -> Result<Vec<f64>> {
        if prefix.first() != Some(&Vocabulary::BOS_ID) {
            return Err(Error::InvalidInput("prefix must begin with BOS".into()));
        }
        self.check_ids(prefix)?;
        let tokens = Tensor::new(prefix, &Device::Cpu)?.unsqueeze(0)?;
        let logits = self.logits(memory, &tokens)?;
        let last = logits.i((0, prefix.len() - 1))?.to_vec1::<f32>()?;
        Ok(softmax_f64(&last, 1.0))
    }

    pub fn start_decoding(&self, memory: &Tensor) -> Result<DecodeState> {
        let cross = self
            .decoder
            .iter()
            .map(|l| l.cross_kv(memory).map(|kv| kv.expect("decoder layer has cross-attention")))
            .collect::<Result<_>>()?;
        Ok(DecodeState {
            caches: vec![LayerCache::default(); self.decoder.len()],
            cross,
            position: 0,
            rows: memory.dim(0)?,
        })
    }

    /// Feeds one token per row and returns next-token logits per row.
    pub fn decode_step(&self, state: &mut DecodeState, tokens: &[u32]) -> Result<Vec<Vec<f32>>> {
        if tokens.len() != state.rows {
            return Err(Error::Shape(format!(
                "{} tokens for {} decoding rows",
                tokens.len(),
                state.rows
            )));
        }
        self.check_ids(tokens)?;
        let h = self.shape.config.hidden;
        let ids = Tensor::new(tokens, &Device::Cpu)?;
        let x = self
            .token_embedding
            .index_select(&ids, 0)?
            .broadcast_add(&self.positions.i(state.position)?)?;
        let mut x = x.reshape((tokens.len(), 1, h))?;
        for (layer, (cache, cross)) in self
            .decoder
            .iter()
            .zip(state.caches.iter_mut().zip(state.cross.iter()))
        {
            x = layer.forward_step(&x, cache, Some(cross))?;
        }
        state.position += 1;
        let x = self.decoder_ln.forward(&x)?;
        let logits = self.head.forward(&x)?.squeeze(1)?.broadcast_add(&self.output_mask)?;
        Ok(logits.to_vec2::<f32>()?)
    }

    /// Summed log-probabilities of each sequence (BOS first) under teacher
    /// forcing; differentiable with respect to the parameters. `memory` holds
    /// one row per sequence.
    pub fn sequence_log_probs(&self, memory: &Tensor, sequences: &[&[u32]]) -> Result<Tensor> {
        let (inputs, targets, mask) = self.teacher_forcing_batch(sequences)?;
        let lp = log_softmax_last(&self.logits(memory, &inputs)?)?;
        let picked = lp.gather(&targets.unsqueeze(D::Minus1)?, D::Minus1)?.squeeze(D::Minus1)?;
        Ok((picked * mask)?.sum(1)?)
    }

    /// Builds `(inputs, targets, mask)` tensors for sequences starting at BOS.
    pub fn teacher_forcing_batch(&self, sequences: &[&[u32]]) -> Result<(Tensor, Tensor, Tensor)> {
        let n = sequences.len();
        let mut steps = 0;
        for s in sequences {
            if s.len() < 2 || s[0] != Vocabulary::BOS_ID {
                return Err(Error::InvalidInput("sequence must be BOS plus at least one token".into()));
            }
            self.check_ids(s)?;
            steps = steps.max(s.len() - 1);
        }
        let mut inputs = vec![Vocabulary::PAD_ID; n * steps];
        let mut targets = vec![Vocabulary::PAD_ID; n * steps];
        let mut mask = vec![0f32; n * steps];
        for (i, s) in sequences.iter().enumerate() {
            for t in 0..s.len() - 1 {
                inputs[i * steps + t] = s[t];
                targets[i * steps + t] = s[t + 1];
                mask[i * steps + t] = 1.0;
            }
        }
        let dev = Device::Cpu;
        Ok((
            Tensor::from_vec(inputs, (n, steps), &dev)?,
            Tensor::from_vec(targets, (n, steps), &dev)?,
            Tensor::from_vec(mask, (n, steps), &dev)?,
        ))
    }

    /// Per-token log-probabilities of one sequence, recomputed from scratch
    /// at `temperature` (not differentiable).
    pub fn rescore(&self, memory: &Tensor, sequence: &[u32], temperature: f64) -> Result<Vec<f64>> {
        let (inputs, targets, _) = self.teacher_forcing_batch(&[sequence])?;
        let logits = self.logits(memory, &inputs)?.squeeze(0)?.to_vec2::<f32>()?;
        let targets = targets.squeeze(0)?.to_vec1::<u32>()?;
        Ok(logits
            .iter()
            .zip(targets)
            .map(|(row, t)| log_softmax_f64(row, temperature)[t as usize])
            .collect())
    }
}

pub(crate) fn log_softmax_f64(logits: &[f32], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&l| l as f64 / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    scaled.iter().map(|v| v - lse).collect()
}

pub(crate) fn softmax_f64(logits: &[f32], temperature: f64) -> Vec<f64> {
    log_softmax_f64(logits, temperature).into_iter().map(f64::exp).collect()
}

/// Mean negative log-likelihood of `targets` under `logits` (N, V),
/// skipping PAD targets.
pub fn xe_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (n, _) = logits.dims2()?;
    if targets.dims() != [n] {
        return Err(Error::Shape(format!(
            "{} logit rows for targets of shape {:?}",
            n,
            targets.dims()
        )));
    }
    let lp = log_softmax_last(logits)?;
    let picked = lp.gather(&targets.unsqueeze(1)?, 1)?.squeeze(1)?;
    let mask = targets.ne(Vocabulary::PAD_ID)?.to_dtype(logits.dtype())?;
    let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if count == 0.0 {
        return Err(Error::InvalidInput("xe_loss over zero non-PAD targets".into()));
    }
    Ok(((picked * mask)?.sum_all()?.neg()? / count)?)
}

#[cfg(test)]
mod tests;
