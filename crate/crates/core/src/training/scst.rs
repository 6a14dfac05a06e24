use std::path::Path;

use candle_core::{DType, Device, Tensor};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::corpus::{epoch_batch, CaptionCorpus};
use super::reward::{RewardFunction, RewardKind};
use crate::captioner::{beam_search, caption_scenes, sample_sequences, Captioner, CaptionerShape};
use crate::checkpoint::{self, StageTag};
use crate::data::{SceneInstance, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::rep_n;
use crate::optim::{Adam, AdamConfig};
use crate::seed;

/// Mean of the rewards of one image's candidates.
pub fn compute_baseline(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::InvalidInput("baseline of zero rewards".into()));
    }
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// Self-critical surrogate `-(1/M) sum_k (r_k - b_g(k)) log p_k` where
/// `b_g` is the mean reward of candidate group `g` (one group per image)
/// and `M` the number of candidates. Rewards are constants. Returns the
/// loss and the advantages.
pub fn scst_surrogate(log_probs: &Tensor, rewards: &[f64], group_sizes: &[usize]) -> Result<(Tensor, Vec<f64>)> {
    let m = log_probs.dims1()?;
    if m != rewards.len() || group_sizes.iter().sum::<usize>() != m {
        return Err(Error::Shape(format!(
            "{m} log-probs, {} rewards, groups summing to {}",
            rewards.len(),
            group_sizes.iter().sum::<usize>()
        )));
    }
    let mut adv = Vec::with_capacity(m);
    let mut start = 0;
    for &g in group_sizes {
        let b = compute_baseline(&rewards[start..start + g])?;
        adv.extend(rewards[start..start + g].iter().map(|r| r - b));
        start += g;
    }
    let a = Tensor::new(adv.as_slice(), &Device::Cpu)?.to_dtype(log_probs.dtype())?;
    let loss = ((a * log_probs)?.sum_all()?.neg()? / m as f64)?;
    Ok((loss, adv))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum CandidateMode {
    /// The top beams of a beam search of width `candidates`.
    Beam,
    /// Independent multinomial samples at `temperature`.
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ScstConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub candidates: usize,
    pub candidate_mode: CandidateMode,
    pub grad_clip: f64,
    pub eval_every: usize,
    /// Validation scenes decoded for the metrics log.
    pub eval_scenes: usize,
}

impl Default for ScstConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 16,
            lr: 2e-4,
            candidates: 5,
            candidate_mode: CandidateMode::Beam,
            grad_clip: 1.0,
            eval_every: 100,
            eval_scenes: 128,
        }
    }
}

impl ScstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.candidates == 0 || self.eval_every == 0 {
            return Err(Error::Config("scst batch, candidates and eval_every must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("scst learning rate must be positive".into()));
        }
        if let CandidateMode::Sample { temperature } = self.candidate_mode {
            if !(temperature > 0.0) {
                return Err(Error::Config("sampling temperature must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScstStepStats {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean of the per-image baselines.
    pub baseline: f64,
    pub loss: f64,
    /// True when every advantage was zero and no update was applied.
    pub skipped: bool,
}

/// One line of the SCST metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScstLogEntry {
    pub step: usize,
    pub mean_reward: f64,
    pub baseline: f64,
    pub val_reward: Option<f64>,
    pub cider: Option<f64>,
    pub rep: [f64; 4],
}

#[derive(Debug)]
pub struct ScstTrainer {
    pub model: Captioner,
    opt: Adam,
    step: usize,
    seed: u64,
    cfg: ScstConfig,
}

impl ScstTrainer {
    pub fn new(model: Captioner, cfg: ScstConfig, seed: u64) -> Result<Self> {
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

    pub fn config(&self) -> &ScstConfig {
        &self.cfg
    }

    fn candidates(&self, vocab: &Vocabulary, memory: &Tensor) -> Result<Vec<Vec<TokenSequence>>> {
        let results = match self.cfg.candidate_mode {
            CandidateMode::Beam => beam_search(&self.model, vocab, memory, self.cfg.candidates)?,
            CandidateMode::Sample { temperature } => {
                let mut rng = seed::rng_indexed(self.seed, "scst-samples", self.step as u64);
                sample_sequences(&self.model, vocab, memory, self.cfg.candidates, temperature, &mut rng)?
            }
        };
        Ok(results.into_iter().map(|r| r.sequences).collect())
    }

    /// Generates candidates for `scenes`, rewards them, and applies one
    /// update of the self-critical surrogate. All-zero advantages skip the
    /// update.
    pub fn scst_step(&mut self, vocab: &Vocabulary, scenes: &[&SceneInstance], reward: &RewardFunction<'_>) -> Result<ScstStepStats> {
        let memory = self.model.encode_scenes(scenes)?;
        let cands = self.candidates(vocab, &memory.detach())?;
        let mut flat_scenes = Vec::new();
        let mut flat: Vec<&TokenSequence> = Vec::new();
        let mut rows: Vec<u32> = Vec::new();
        let mut groups = Vec::with_capacity(scenes.len());
        for (i, (scene, cs)) in scenes.iter().zip(&cands).enumerate() {
            groups.push(cs.len());
            for c in cs {
                flat_scenes.push(*scene);
                flat.push(c);
                rows.push(i as u32);
            }
        }
        let rewards = reward.rewards(&flat_scenes, &flat)?;
        let baselines: Vec<f64> = {
            let mut start = 0;
            groups
                .iter()
                .map(|&g| {
                    let b = compute_baseline(&rewards[start..start + g]);
                    start += g;
                    b
                })
                .collect::<Result<_>>()?
        };
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let baseline = baselines.iter().sum::<f64>() / baselines.len() as f64;
        let idx = Tensor::new(rows.as_slice(), &Device::Cpu)?;
        let seqs: Vec<&[u32]> = flat.iter().map(|c| c.ids.as_slice()).collect();
        let lp = self.model.sequence_log_probs(&memory.index_select(&idx, 0)?, &seqs)?;
        let (loss, adv) = scst_surrogate(&lp, &rewards, &groups)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                detail: format!("scst surrogate {value}"),
            });
        }
        let skipped = adv.iter().all(|&a| a == 0.0);
        if !skipped {
            self.opt.backward_step(&loss, self.cfg.lr)?;
        }
        self.step += 1;
        Ok(ScstStepStats {
            step: self.step,
            mean_reward,
            baseline,
            loss: value,
            skipped,
        })
    }

    /// Greedy-decodes `val` and reports mean reward, CIDEr-D and Rep-n.
    pub fn evaluate(&self, vocab: &Vocabulary, val: &CaptionCorpus<'_>, reward: &RewardFunction<'_>, cider: &RewardFunction<'_>) -> Result<(f64, f64, [f64; 4])> {
        let scenes: Vec<&SceneInstance> = val.scenes.iter().take(self.cfg.eval_scenes).copied().collect();
        if scenes.is_empty() {
            return Err(Error::InvalidInput("scst evaluation needs validation scenes".into()));
        }
        let caps = caption_scenes(&self.model, vocab, &scenes, 1, 64)?;
        let refs: Vec<&TokenSequence> = caps.iter().collect();
        let n = scenes.len() as f64;
        // A CIDEr reward only knows its own split's references.
        let reward = if reward.kind() == RewardKind::Cider { cider } else { reward };
        let r = reward.rewards(&scenes, &refs)?.iter().sum::<f64>() / n;
        let c = cider.rewards(&scenes, &refs)?.iter().sum::<f64>() / n;
        let texts: Vec<&str> = caps.iter().map(|c| c.text.as_str()).collect();
        let mut rep = [0.0; 4];
        for (k, slot) in rep.iter_mut().enumerate() {
            *slot = rep_n(&texts, k + 1)?;
        }
        Ok((r, c, rep))
    }

    /// Runs until `until` total steps. The reward's resources are verified
    /// unchanged afterwards.
    pub fn run(
        &mut self,
        vocab: &Vocabulary,
        train: &CaptionCorpus<'_>,
        val: Option<&CaptionCorpus<'_>>,
        reward: &RewardFunction<'_>,
        until: usize,
    ) -> Result<Vec<ScstLogEntry>> {
        let before = reward.resource_hash()?;
        let cider = match val {
            Some(v) => Some(RewardFunction::cider(&v.scenes)?),
            None => None,
        };
        let until = until.min(self.cfg.steps);
        let mut log = Vec::new();
        let mut recent: Vec<ScstStepStats> = Vec::new();
        let batches_seed = seed::derive(self.seed, "scst-batches");
        while self.step < until {
            let idx = epoch_batch(train.len(), self.cfg.batch, self.step, batches_seed)?;
            let scenes: Vec<&SceneInstance> = idx.iter().map(|&i| train.scenes[i]).collect();
            recent.push(self.scst_step(vocab, &scenes, reward)?);
            if self.step % self.cfg.eval_every == 0 || self.step == self.cfg.steps {
                let k = recent.len() as f64;
                let mean_reward = recent.iter().map(|s| s.mean_reward).sum::<f64>() / k;
                let baseline = recent.iter().map(|s| s.baseline).sum::<f64>() / k;
                recent.clear();
                let (val_reward, c, rep) = match (val, &cider) {
                    (Some(v), Some(cf)) => {
                        let (r, c, rep) = self.evaluate(vocab, v, reward, cf)?;
                        (Some(r), Some(c), rep)
                    }
                    _ => (None, None, [0.0; 4]),
                };
                log::info!(
                    "scst[{}] step {}: reward {mean_reward:.4} val {val_reward:?} cider {c:?} rep {rep:?}",
                    reward.kind().name(),
                    self.step
                );
                log.push(ScstLogEntry {
                    step: self.step,
                    mean_reward,
                    baseline,
                    val_reward,
                    cider: c,
                    rep,
                });
            }
        }
        let after = reward.resource_hash()?;
        if before != after {
            return Err(Error::HashMismatch {
                artifact: format!("{} reward resources", reward.kind().name()),
                expected: before,
                found: after,
            });
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path, kind: RewardKind, stage: StageTag, meta: serde_json::Value) -> Result<String> {
        let tensors: Vec<(String, Tensor)> = self
            .model
            .store()
            .named_tensors()
            .into_iter()
            .map(|(k, t)| (format!("model.{k}"), t))
            .collect();
        let meta = serde_json::json!({
            "step": self.step,
            "seed": self.seed,
            "reward": kind,
            "config": self.cfg,
            "shape": self.model.shape(),
            "extra": meta,
        });
        checkpoint::save(path, &self.model.config_hash(), stage, meta, &tensors)
    }
}

/// Loads an SCST-trained captioner.
pub fn load_scst(path: &Path, shape: &CaptionerShape) -> Result<Captioner> {
    super::xe::load_captioner(path, shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_is_mean() {
        assert!((compute_baseline(&[0.2, 0.4, 0.9]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(compute_baseline(&[0.7]).unwrap(), 0.7);
        assert!(compute_baseline(&[]).is_err());
    }

    #[test]
    fn equal_rewards_have_zero_gradient() {
        let lp = candle_core::Var::new(&[-1.0f64, -2.0, -0.5, -3.0], &Device::Cpu).unwrap();
        let (loss, adv) = scst_surrogate(lp.as_tensor(), &[0.3, 0.3, 0.8, 0.8], &[2, 2]).unwrap();
        assert!(adv.iter().all(|&a| a == 0.0));
        let g = loss.backward().unwrap().get(lp.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_is_minus_advantage_over_count() {
        let lp = candle_core::Var::new(&[-1.0f64, -2.0, -0.5], &Device::Cpu).unwrap();
        let (loss, adv) = scst_surrogate(lp.as_tensor(), &[1.0, 0.0, 0.5], &[3]).unwrap();
        assert_eq!(adv, vec![0.5, -0.5, 0.0]);
        let g = loss.backward().unwrap().get(lp.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        for (gi, ai) in g.iter().zip(&adv) {
            assert!((gi + ai / 3.0).abs() < 1e-15);
        }
        assert!(scst_surrogate(lp.as_tensor(), &[1.0], &[1]).is_err());
    }
}
