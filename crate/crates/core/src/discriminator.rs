//! Fine-tuning a dual encoder into a discriminator with hard negatives and
//! a contrastive loss that ignores the negative columns.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand::Rng as _;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::{SceneInstance, Vocabulary};
use crate::dual_encoder::{similarity, DualEncoder, EpochSampler, LoraConfig, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::negatives::NegativeSet;
use crate::nn::log_softmax_last;
use crate::optim::{Adam, AdamConfig};
use crate::seed::Rng;

/// Texts ordered `[T_1..T_N, Z_1^1, Z_1^2, ..., Z_N^1, Z_N^2]` for `N`
/// images; text `j < N` is the positive of image `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    pub scene_ids: Vec<u64>,
    pub texts: Vec<Vec<u32>>,
}

impl AugmentedBatch {
    pub fn new(scene_ids: Vec<u64>, positives: Vec<Vec<u32>>, negatives: Vec<[Vec<u32>; 2]>) -> Result<Self> {
        let n = scene_ids.len();
        if n == 0 || positives.len() != n || negatives.len() != n {
            return Err(Error::Shape(format!(
                "augmented batch: {n} images, {} positives, {} negative pairs",
                positives.len(),
                negatives.len()
            )));
        }
        let mut texts = positives;
        for [z1, z2] in negatives {
            texts.push(z1);
            texts.push(z2);
        }
        Ok(Self { scene_ids, texts })
    }

    pub fn len(&self) -> usize {
        self.scene_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scene_ids.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.scene_ids.is_empty() || self.texts.len() != 3 * self.scene_ids.len() {
            return Err(Error::Shape(format!(
                "augmented batch needs 3N texts, got {} for N = {}",
                self.texts.len(),
                self.scene_ids.len()
            )));
        }
        Ok(())
    }
}

/// `S[i][j] = cos(image_i, text_j)`, shape `N x 3N`.
pub fn extended_similarity(encoder: &DualEncoder, scenes: &[&SceneInstance], batch: &AugmentedBatch) -> Result<SimilarityMatrix> {
    batch.validate()?;
    if scenes.len() != batch.len() || scenes.iter().zip(&batch.scene_ids).any(|(s, &id)| s.id != id) {
        return Err(Error::InvalidInput("scenes do not match the augmented batch".into()));
    }
    let texts: Vec<&[u32]> = batch.texts.iter().map(Vec::as_slice).collect();
    let t = encoder.embed_texts(&texts)?;
    let v = encoder.embed_scenes(scenes)?;
    similarity(&v, &t)
}

fn cross_entropy_diag(logits: &Tensor) -> Result<Tensor> {
    let (rows, cols) = logits.dims2()?;
    let eye = Tensor::eye(cols, logits.dtype(), logits.device())?.narrow(0, 0, rows)?;
    let lp = log_softmax_last(logits)?;
    Ok(((lp * eye)?.sum_all()?.neg()? / rows as f64)?)
}

/// `1/2 (row + col)`: rows are cross-entropy over all `3N` texts with target
/// `i`; columns `j < N` are cross-entropy over the `N` images with target
/// `j`; negative columns add no column term.
pub fn masked_contrastive_loss(s: &Tensor, logit_scale: &Tensor) -> Result<Tensor> {
    let (n, m) = s.dims2()?;
    if n == 0 || m != 3 * n {
        return Err(Error::Shape(format!("masked loss needs N x 3N, got {n}x{m}")));
    }
    let logits = s.broadcast_mul(&logit_scale.to_dtype(s.dtype())?.reshape(())?)?;
    let row = cross_entropy_diag(&logits)?;
    let col = cross_entropy_diag(&logits.narrow(1, 0, n)?.t()?.contiguous()?)?;
    Ok(((row + col)? * 0.5)?)
}

/// Mann-Whitney AUC, ties count one half.
pub fn auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidInput("AUC needs positives and negatives".into()));
    }
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in positives {
        let below = neg.partition_point(|&x| x < p);
        let not_above = neg.partition_point(|&x| x <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (positives.len() * negatives.len()) as f64)
}

/// Mean over rows of `S_ii - max_{j >= N} S_ij`.
pub fn mean_margin(s: &[Vec<f32>]) -> Result<f64> {
    let n = s.len();
    if n == 0 || s.iter().any(|r| r.len() != 3 * n) {
        return Err(Error::Shape("margin needs an N x 3N matrix".into()));
    }
    let total: f64 = s
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let neg = r[n..].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            f64::from(r[i]) - f64::from(neg)
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lora: LoraConfig,
    /// Substrings selecting adapted linear maps; empty adapts all of them.
    pub lora_targets: Vec<String>,
    pub eval_every: usize,
    /// Held-out scenes used for the margin and AUC curve.
    pub eval_scenes: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            lr: 1e-4,
            weight_decay: 0.01,
            lora: LoraConfig::default(),
            lora_targets: Vec::new(),
            eval_every: 100,
            eval_scenes: 128,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.eval_every == 0 || self.eval_scenes == 0 {
            return Err(Error::Config("discriminator batch, eval_every and eval_scenes must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("discriminator lr must be positive and weight decay non-negative".into()));
        }
        if self.lora.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Training loss of the most recent batch; `None` before the first step.
    pub loss: Option<f64>,
    pub margin: f64,
    pub auc: f64,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("step,loss,margin,auc\n");
    for p in points {
        let loss = p.loss.map_or_else(String::new, |l| l.to_string());
        out.push_str(&format!("{},{},{},{}\n", p.step, loss, p.margin, p.auc));
    }
    out
}

/// Scenes with their tokenized references and negatives.
#[derive(Debug, Clone)]
pub struct NegativeCorpus<'a> {
    pub scenes: Vec<&'a SceneInstance>,
    pub references: Vec<Vec<Vec<u32>>>,
    pub negatives: Vec<[Vec<u32>; 2]>,
}

fn content_ids(vocab: &Vocabulary, text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|w| {
            vocab
                .id(w)
                .ok_or_else(|| Error::UnknownToken(w.to_owned()))
        })
        .collect()
}

impl<'a> NegativeCorpus<'a> {
    /// Pairs every scene with its negatives; a scene without negatives is
    /// an error.
    pub fn new(scenes: &[&'a SceneInstance], vocab: &Vocabulary, negatives: &[NegativeSet]) -> Result<Self> {
        let by_id: BTreeMap<u64, &NegativeSet> = negatives.iter().map(|n| (n.scene_id, n)).collect();
        let mut references = Vec::with_capacity(scenes.len());
        let mut negs = Vec::with_capacity(scenes.len());
        for s in scenes {
            let n = by_id.get(&s.id).ok_or_else(|| Error::MissingDependency {
                stage: "finetune-discriminator".into(),
                missing: "mine-negatives".into(),
                artifact: format!("negatives for scene {}", s.id),
            })?;
            references.push(
                s.references
                    .iter()
                    .map(|r| content_ids(vocab, r))
                    .collect::<Result<Vec<_>>>()?,
            );
            negs.push([content_ids(vocab, &n.z1)?, content_ids(vocab, &n.z2)?]);
        }
        Ok(Self {
            scenes: scenes.to_vec(),
            references,
            negatives: negs,
        })
    }

    /// Batch of the scenes at `idx`; positive is reference `pick(k)`.
    pub fn batch(&self, idx: &[usize], mut pick: impl FnMut(usize) -> usize) -> Result<(Vec<&'a SceneInstance>, AugmentedBatch)> {
        let scenes: Vec<&SceneInstance> = idx.iter().map(|&i| self.scenes[i]).collect();
        let batch = AugmentedBatch::new(
            scenes.iter().map(|s| s.id).collect(),
            idx.iter()
                .map(|&i| self.references[i][pick(i) % self.references[i].len()].clone())
                .collect(),
            idx.iter().map(|&i| self.negatives[i].clone()).collect(),
        )?;
        Ok((scenes, batch))
    }
}

/// Held-out margin and AUC. Positives are `(scene, first reference)`;
/// negatives are `(scene, z)` for both negatives of each scene.
pub fn separation(encoder: &DualEncoder, held_out: &NegativeCorpus<'_>, chunk: usize) -> Result<(f64, f64)> {
    let n = held_out.scenes.len();
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(2 * n);
    let mut margins = 0.0;
    let idx: Vec<usize> = (0..n).collect();
    let mut chunks = 0usize;
    for part in idx.chunks(chunk.max(1)) {
        let (scenes, batch) = held_out.batch(part, |_| 0)?;
        let s = extended_similarity(encoder, &scenes, &batch)?.to_vec2()?;
        let k = part.len();
        for (i, row) in s.iter().enumerate() {
            pos.push(f64::from(row[i]));
            neg.push(f64::from(row[k + 2 * i]));
            neg.push(f64::from(row[k + 2 * i + 1]));
        }
        margins += mean_margin(&s)? * k as f64;
        chunks += k;
    }
    Ok((margins / chunks as f64, auc(&pos, &neg)?))
}

/// Result of [`finetune_discriminator`].
#[derive(Debug)]
pub struct FinetuneOutcome {
    pub encoder: DualEncoder,
    pub curve: Vec<CurvePoint>,
}

/// Injects LoRA adapters into a copy of `base` and trains adapters plus the
/// logit scale with [`masked_contrastive_loss`]. Base weights are verified
/// unchanged afterwards.
pub fn finetune_discriminator(
    base: &DualEncoder,
    train: &NegativeCorpus<'_>,
    held_out: &NegativeCorpus<'_>,
    cfg: &DiscriminatorConfig,
    rng: &mut Rng,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.scenes.is_empty() || held_out.scenes.is_empty() {
        return Err(Error::InvalidInput("discriminator fine-tuning needs train and held-out scenes".into()));
    }
    let mut encoder = base.detached_copy()?;
    let frozen = encoder.base_params().content_hash()?;
    let targets: Vec<&str> = cfg.lora_targets.iter().map(String::as_str).collect();
    encoder.inject_lora(cfg.lora, &targets, rng.random())?;
    let mut opt = Adam::new(
        encoder.trainable(),
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    )?;
    let eval_set = NegativeCorpus {
        scenes: held_out.scenes.iter().take(cfg.eval_scenes).copied().collect(),
        references: held_out.references.iter().take(cfg.eval_scenes).cloned().collect(),
        negatives: held_out.negatives.iter().take(cfg.eval_scenes).cloned().collect(),
    };
    let eval_chunk = cfg.batch.max(2);
    let mut curve = Vec::new();
    let (margin, a) = separation(&encoder, &eval_set, eval_chunk)?;
    curve.push(CurvePoint { step: 0, loss: None, margin, auc: a });
    let mut sampler = EpochSampler::new(train.scenes.len());
    for step in 1..=cfg.steps {
        let idx = sampler.next_batch(cfg.batch, rng);
        let picks: Vec<usize> = idx.iter().map(|_| rng.random_range(0..usize::MAX)).collect();
        let mut k = 0;
        let (scenes, batch) = train.batch(&idx, |_| {
            k += 1;
            picks[k - 1]
        })?;
        let s = extended_similarity(&encoder, &scenes, &batch)?;
        let loss = masked_contrastive_loss(s.as_tensor(), &encoder.logit_scale()?)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("discriminator loss {value}"),
            });
        }
        opt.backward_step(&loss, cfg.lr)?;
        encoder.clamp_logit_scale()?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let (margin, a) = separation(&encoder, &eval_set, eval_chunk)?;
            log::info!("discriminator step {step}: loss {value:.4} margin {margin:.4} auc {a:.4}");
            curve.push(CurvePoint { step, loss: Some(value), margin, auc: a });
        }
    }
    if encoder.base_params().content_hash()? != frozen {
        return Err(Error::HashMismatch {
            artifact: "frozen dual-encoder weights".into(),
            expected: frozen,
            found: encoder.base_params().content_hash()?,
        });
    }
    Ok(FinetuneOutcome { encoder, curve })
}

#[cfg(test)]
mod tests {
    use candle_core::{Device, Var};

    use super::*;
    use crate::dual_encoder::scalar;

    fn mat(rows: &[&[f64]]) -> Tensor {
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), rows[0].len()), &Device::Cpu).unwrap()
    }

    fn value(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn single_image_with_duplicated_negatives() {
        let s = mat(&[&[0.3, 0.3, 0.3]]);
        let loss = masked_contrastive_loss(&s, &scalar(7.0, DType::F64).unwrap()).unwrap();
        assert!((value(&loss) - 0.5 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matched_large_scale_goes_to_zero() {
        let s = mat(&[&[1.0, -1.0, -1.0, -1.0, -1.0, -1.0], &[-1.0, 1.0, -1.0, -1.0, -1.0, -1.0]]);
        let loss = masked_contrastive_loss(&s, &scalar(100.0, DType::F64).unwrap()).unwrap();
        assert!(value(&loss) < 1e-80);
    }

    #[test]
    fn lowering_negatives_lowers_loss() {
        let hi = mat(&[&[0.5, 0.1, 0.4, 0.4, 0.2, 0.2], &[0.0, 0.6, 0.3, 0.1, 0.5, 0.5]]);
        let lo = mat(&[&[0.5, 0.1, -0.9, -0.9, 0.2, 0.2], &[0.0, 0.6, 0.3, 0.1, -0.9, -0.9]]);
        let scale = scalar(10.0, DType::F64).unwrap();
        let a = value(&masked_contrastive_loss(&hi, &scale).unwrap());
        let b = value(&masked_contrastive_loss(&lo, &scale).unwrap());
        assert!(b < a);
    }

    #[test]
    fn wrong_shape_is_error() {
        let scale = scalar(1.0, DType::F64).unwrap();
        assert!(masked_contrastive_loss(&mat(&[&[0.1, 0.2]]), &scale).is_err());
    }

    #[test]
    fn negative_columns_get_no_column_gradient() {
        // with row term removed by a zero-scale trick, negative columns only
        // enter through the row softmax: their gradient equals the row-term
        // gradient computed on its own
        let s = Var::from_tensor(&mat(&[&[0.5, 0.1, 0.4, 0.3, 0.2, 0.1], &[0.0, 0.6, 0.3, 0.1, 0.5, 0.2]])).unwrap();
        let scale = scalar(3.0, DType::F64).unwrap();
        let full = masked_contrastive_loss(s.as_tensor(), &scale).unwrap();
        let g_full = full.backward().unwrap().get(s.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        let logits = (s.as_tensor() * 3.0).unwrap();
        let row = (cross_entropy_diag(&logits).unwrap() * 0.5).unwrap();
        let g_row = row.backward().unwrap().get(s.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        for i in 0..2 {
            for j in 2..6 {
                assert!((g_full[i][j] - g_row[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn auc_counts_ties_half() {
        assert_eq!(auc(&[1.0, 2.0], &[0.0, 0.5]).unwrap(), 1.0);
        assert_eq!(auc(&[0.0], &[1.0]).unwrap(), 0.0);
        assert_eq!(auc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert!((auc(&[1.0, 3.0], &[2.0, 1.0]).unwrap() - 0.625).abs() < 1e-12);
    }

    #[test]
    fn margin_uses_hardest_negative() {
        assert!((mean_margin(&[vec![0.9f32, 0.2, 0.5]]).unwrap() - 0.4).abs() < 1e-6);
        assert!(mean_margin(&[vec![0.9f32, 0.2]]).is_err());
        let s2 = vec![vec![0.9f32, 0.1, 0.3, 0.2, 0.5, 0.1], vec![0.2f32, 0.8, 0.3, 0.2, 0.5, 0.1]];
        let m = mean_margin(&s2).unwrap();
        assert!((m - ((0.9 - 0.5) + (0.8 - 0.5)) / 2.0).abs() < 1e-6);
    }
}
