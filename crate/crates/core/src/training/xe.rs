use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng as _;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::corpus::{epoch_batch, CaptionCorpus};
use super::schedule::LrSchedule;
use crate::captioner::{xe_loss, Captioner, CaptionerShape};
use crate::checkpoint::{self, StageTag};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct XeConfig {
    pub steps: usize,
    pub batch: usize,
    pub schedule: LrSchedule,
    pub grad_clip: f64,
    pub eval_every: usize,
}

impl Default for XeConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 32,
            schedule: LrSchedule {
                warmup: 100,
                peak: 2e-3,
                plateau_end: 1000,
                decay_end: 1500,
                floor: 2e-4,
            },
            grad_clip: 1.0,
            eval_every: 250,
        }
    }
}

impl XeConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch == 0 || self.eval_every == 0 {
            return Err(Error::Config("xe batch and eval_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XeLogEntry {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Cross-entropy training state; checkpoints hold parameters, optimizer
/// moments and the step so resumed training follows the same trajectory.
#[derive(Debug)]
pub struct XeTrainer {
    pub model: Captioner,
    opt: Adam,
    step: usize,
    seed: u64,
    cfg: XeConfig,
}

impl XeTrainer {
    pub fn new(model: Captioner, cfg: XeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(
            model.store().named_vars(),
            AdamConfig {
                grad_clip: cfg.grad_clip,
                ..AdamConfig::default()
            },
        )?;
        Ok(Self {
            model,
            opt,
            step: 0,
            seed,
            cfg,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn batch_loss(&self, corpus: &CaptionCorpus<'_>, idx: &[usize], pick: &[usize]) -> Result<Tensor> {
        let scenes: Vec<_> = idx.iter().map(|&i| corpus.scenes[i]).collect();
        let seqs: Vec<&[u32]> = idx
            .iter()
            .zip(pick)
            .map(|(&i, &k)| corpus.references[i][k].ids.as_slice())
            .collect();
        let memory = self.model.encode_scenes(&scenes)?;
        let (inputs, targets, _) = self.model.teacher_forcing_batch(&seqs)?;
        let logits = self.model.logits(&memory, &inputs)?;
        let v = logits.dim(2)?;
        xe_loss(&logits.reshape(((), v))?, &targets.flatten_all()?)
    }

    /// Mean teacher-forced loss over every reference of `corpus`.
    pub fn eval_loss(&self, corpus: &CaptionCorpus<'_>) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        let idx: Vec<usize> = (0..corpus.len()).collect();
        for part in idx.chunks(self.cfg.batch.max(1)) {
            for k in 0..crate::data::REFS_PER_SCENE {
                let pick = vec![k; part.len()];
                let loss = self.batch_loss(corpus, part, &pick)?;
                sum += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * part.len() as f64;
                count += part.len();
            }
        }
        if count == 0 {
            return Err(Error::InvalidInput("evaluation corpus is empty".into()));
        }
        Ok(sum / count as f64)
    }

    /// Trains until `until` total steps (capped at the configured step
    /// count). Batches and reference choices depend only on the seed and
    /// the step index.
    pub fn run(&mut self, train: &CaptionCorpus<'_>, val: Option<&CaptionCorpus<'_>>, until: usize) -> Result<Vec<XeLogEntry>> {
        let until = until.min(self.cfg.steps);
        let mut log = Vec::new();
        while self.step < until {
            let idx = epoch_batch(train.len(), self.cfg.batch, self.step, seed::derive(self.seed, "xe-batches"))?;
            let mut rng = seed::rng_indexed(self.seed, "xe-refs", self.step as u64);
            let pick: Vec<usize> = idx.iter().map(|&i| rng.random_range(0..train.references[i].len())).collect();
            let loss = self.batch_loss(train, &idx, &pick)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: self.step,
                    detail: format!("cross-entropy loss {value}"),
                });
            }
            let lr = self.cfg.schedule.lr(self.step);
            self.opt.backward_step(&loss, lr)?;
            self.step += 1;
            if self.step % self.cfg.eval_every == 0 || self.step == self.cfg.steps {
                let val_loss = val.map(|v| self.eval_loss(v)).transpose()?;
                log::info!("xe step {}: loss {value:.4} val {val_loss:?}", self.step);
                log.push(XeLogEntry {
                    step: self.step,
                    lr,
                    train_loss: value,
                    val_loss,
                });
            }
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<String> {
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .store()
            .named_tensors()
            .into_iter()
            .map(|(k, t)| (format!("model.{k}"), t))
            .collect();
        tensors.extend(self.opt.state().into_iter().map(|(k, t)| (format!("opt.{k}"), t)));
        let meta = serde_json::json!({
            "step": self.step,
            "seed": self.seed,
            "config": self.cfg,
            "shape": self.model.shape(),
            "extra": meta,
        });
        checkpoint::save(path, &self.model.config_hash(), StageTag::Xe, meta, &tensors)
    }

    /// Restores a trainer saved by [`XeTrainer::save`].
    pub fn load(path: &Path, shape: &CaptionerShape, cfg: XeConfig) -> Result<Self> {
        let ck = checkpoint::load(path, Some(&shape.hash()))?;
        if ck.header.stage != StageTag::Xe {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("expected an xe checkpoint, found {:?}", ck.header.stage),
            });
        }
        let step = ck.header.meta["step"].as_u64().unwrap_or(0) as usize;
        let seed = ck.header.meta["seed"].as_u64().unwrap_or(0);
        let model = Captioner::new(shape.clone(), 0)?;
        model.store().load(&ck.group("model"))?;
        let mut trainer = Self::new(model, cfg, seed)?;
        trainer.opt.load_state(step, &ck.group("opt"))?;
        trainer.step = step;
        Ok(trainer)
    }
}

/// Loads only the captioner weights from an xe or scst checkpoint.
pub fn load_captioner(path: &Path, shape: &CaptionerShape) -> Result<Captioner> {
    let ck = checkpoint::load(path, Some(&shape.hash()))?;
    let model = Captioner::new(shape.clone(), 0)?;
    let group = ck.group("model");
    if group.is_empty() {
        model.store().load(&ck.tensors)?;
    } else {
        model.store().load(&group)?;
    }
    Ok(model)
}
