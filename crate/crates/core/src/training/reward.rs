use std::collections::BTreeMap;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::{SceneInstance, TokenSequence};
use crate::dual_encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::metrics::{cider_d, DocumentFrequencies};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Cider,
    RawScore,
    Discriminator,
}

impl RewardKind {
    pub fn name(self) -> &'static str {
        match self {
            RewardKind::Cider => "cider",
            RewardKind::RawScore => "raw_score",
            RewardKind::Discriminator => "discriminator",
        }
    }
}

/// Sequence-level reward. Pure: the same (scene, caption) always yields the
/// same value.
#[derive(Debug)]
pub enum RewardFunction<'a> {
    /// CIDEr-D against the scene's references with fixed document
    /// frequencies.
    Cider {
        df: DocumentFrequencies,
        references: BTreeMap<u64, Vec<String>>,
    },
    /// `w * max(0, cos)` under a dual encoder.
    Score {
        kind: RewardKind,
        encoder: &'a DualEncoder,
        w: f64,
    },
}

impl<'a> RewardFunction<'a> {
    /// CIDEr-D reward with document frequencies over `scenes`' references.
    pub fn cider(scenes: &[&SceneInstance]) -> Result<Self> {
        let sets: Vec<Vec<String>> = scenes.iter().map(|s| s.references.to_vec()).collect();
        Ok(RewardFunction::Cider {
            df: DocumentFrequencies::from_reference_sets(&sets)?,
            references: scenes.iter().map(|s| (s.id, s.references.to_vec())).collect(),
        })
    }

    pub fn score(kind: RewardKind, encoder: &'a DualEncoder, w: f64) -> Result<Self> {
        if kind == RewardKind::Cider {
            return Err(Error::Reward("CIDEr is not an encoder score".into()));
        }
        if !(w > 0.0) {
            return Err(Error::Reward(format!("score multiplier must be positive, got {w}")));
        }
        Ok(RewardFunction::Score { kind, encoder, w })
    }

    pub fn kind(&self) -> RewardKind {
        match self {
            RewardFunction::Cider { .. } => RewardKind::Cider,
            RewardFunction::Score { kind, .. } => *kind,
        }
    }

    /// Hash of the resources the reward reads; unchanged by training.
    pub fn resource_hash(&self) -> Result<String> {
        match self {
            RewardFunction::Cider { references, .. } => crate::io::value_hash(references),
            RewardFunction::Score { encoder, .. } => Ok(format!(
                "{}:{}:{}",
                encoder.base_params().content_hash()?,
                encoder.adapter_params().content_hash()?,
                encoder.scale_params().content_hash()?
            )),
        }
    }

    /// Rewards of `captions[k]` for `scenes[k]`. An empty caption scores 0
    /// under CIDEr-D.
    pub fn rewards(&self, scenes: &[&SceneInstance], captions: &[&TokenSequence]) -> Result<Vec<f64>> {
        if scenes.len() != captions.len() {
            return Err(Error::Reward(format!(
                "{} scenes for {} captions",
                scenes.len(),
                captions.len()
            )));
        }
        match self {
            RewardFunction::Cider { df, references } => scenes
                .iter()
                .zip(captions)
                .map(|(s, c)| {
                    let refs = references
                        .get(&s.id)
                        .ok_or_else(|| Error::Reward(format!("no references for scene {}", s.id)))?;
                    if c.text.trim().is_empty() {
                        Ok(0.0)
                    } else {
                        cider_d(&c.text, refs, df)
                    }
                })
                .collect(),
            RewardFunction::Score { encoder, w, .. } => {
                let content: Vec<Vec<u32>> = captions.iter().map(|c| c.content()).collect();
                let refs: Vec<&[u32]> = content.iter().map(Vec::as_slice).collect();
                let r = encoder.reward_scores(scenes, &refs, *w)?;
                if let Some(bad) = r.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Reward(format!("non-finite reward {bad}")));
                }
                Ok(r)
            }
        }
    }
}
