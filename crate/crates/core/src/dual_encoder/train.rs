use rand::seq::SliceRandom;
use rand::Rng as _;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::{clip_contrastive_loss, similarity, DualEncoder};
use crate::data::SceneInstance;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 32,
            lr: 1e-3,
            warmup: 50,
            weight_decay: 0.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config("contrastive batch must hold at least 2 pairs".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("contrastive learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Draws batches of distinct scenes, reshuffling every epoch.
#[derive(Debug)]
pub struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    pub fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            cursor: len,
        }
    }

    pub fn next_batch(&mut self, size: usize, rng: &mut Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.cursor + size > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        out
    }
}

/// Trains every trainable parameter of `encoder` with the paired contrastive
/// loss on (scene, random reference) batches. `references[k]` holds content
/// token ids of the references of `scenes[k]`. Returns the loss per step.
pub fn train_contrastive(
    encoder: &DualEncoder,
    scenes: &[&SceneInstance],
    references: &[Vec<Vec<u32>>],
    cfg: &ContrastiveConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if scenes.len() != references.len() || scenes.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "contrastive training needs >= 2 scenes with references, got {} scenes and {} reference sets",
            scenes.len(),
            references.len()
        )));
    }
    let mut opt = Adam::new(
        encoder.trainable(),
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    )?;
    let mut sampler = EpochSampler::new(scenes.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch, rng);
        let batch_scenes: Vec<&SceneInstance> = idx.iter().map(|&i| scenes[i]).collect();
        let caps: Vec<&[u32]> = idx
            .iter()
            .map(|&i| {
                let r = &references[i];
                r[rng.random_range(0..r.len())].as_slice()
            })
            .collect();
        let t = encoder.embed_texts(&caps)?;
        let v = encoder.embed_scenes(&batch_scenes)?;
        let s = similarity(&t, &v)?;
        let loss = clip_contrastive_loss(s.as_tensor(), &encoder.logit_scale()?)?;
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("contrastive loss {value}"),
            });
        }
        let lr = cfg.lr * ((step + 1) as f64 / cfg.warmup.max(1) as f64).min(1.0);
        opt.backward_step(&loss, lr)?;
        encoder.clamp_logit_scale()?;
        losses.push(value);
    }
    Ok(losses)
}
