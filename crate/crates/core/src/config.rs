//! Run configuration: one TOML file with a published JSON schema.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::captioner::CaptionerConfig;
use crate::data::{DataConfig, WorldConfig};
use crate::discriminator::DiscriminatorConfig;
use crate::dual_encoder::{ContrastiveConfig, EncoderConfig};
use crate::error::{Error, Result};
use crate::negatives::CorruptionMode;
use crate::training::{ScstConfig, XeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSourceKind {
    /// Mined from the two reward-hacked captioners.
    #[serde(rename = "self")]
    SelfGenerated,
    /// Corruptions of references.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct NegativesConfig {
    pub source: NegativeSourceKind,
    pub manual_modes: Vec<CorruptionMode>,
}

impl Default for NegativesConfig {
    fn default() -> Self {
        Self {
            source: NegativeSourceKind::SelfGenerated,
            manual_modes: CorruptionMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub captioner: CaptionerConfig,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            captioner: CaptionerConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub xe: XeConfig,
    /// Base dual-encoder contrastive training.
    pub encoder: ContrastiveConfig,
    /// Extra contrastive training on references that yields the cleaner
    /// scorer used to train captioner B.
    pub clean_encoder: ContrastiveConfig,
    /// SCST of the two captioners whose outputs are mined as negatives.
    pub reward_captioner: ScstConfig,
    /// SCST of the compared runs (cider, raw_score, discriminator).
    pub scst: ScstConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            xe: XeConfig::default(),
            encoder: ContrastiveConfig::default(),
            clean_encoder: ContrastiveConfig {
                steps: 300,
                lr: 3e-4,
                ..ContrastiveConfig::default()
            },
            reward_captioner: ScstConfig {
                steps: 300,
                ..ScstConfig::default()
            },
            scst: ScstConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Multiplier `w` of `w * max(0, cos)`.
    pub w: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { w: 2.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub split: String,
    /// 1 decodes greedily.
    pub beam_size: usize,
    pub batch: usize,
    pub samples: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            split: "val".into(),
            beam_size: 1,
            batch: 64,
            samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory; the CLI flag and `CAPREWARD_OUT_DIR` take precedence.
    pub out_dir: Option<String>,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub negatives: NegativesConfig,
    pub discriminator: DiscriminatorConfig,
    pub reward: RewardConfig,
    pub metric: MetricConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: None,
            world: WorldConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            negatives: NegativesConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            reward: RewardConfig::default(),
            metric: MetricConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.data.validate()?;
        self.model.captioner.validate()?;
        self.model.encoder.validate()?;
        self.training.xe.validate()?;
        self.training.encoder.validate()?;
        self.training.clean_encoder.validate()?;
        self.training.reward_captioner.validate()?;
        self.training.scst.validate()?;
        self.discriminator.validate()?;
        if !(self.reward.w > 0.0) {
            return Err(Error::Config("reward.w must be positive".into()));
        }
        if !["train", "val", "test", "shifted"].contains(&self.metric.split.as_str()) {
            return Err(Error::Config(format!("unknown metric split `{}`", self.metric.split)));
        }
        if self.metric.beam_size == 0 || self.metric.batch == 0 {
            return Err(Error::Config("metric beam_size and batch must be positive".into()));
        }
        if self.negatives.source == NegativeSourceKind::Manual && self.negatives.manual_modes.is_empty() {
            return Err(Error::Config("manual negatives need at least one mode".into()));
        }
        Ok(())
    }

    /// Hash of the canonical JSON form; independent of TOML formatting.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = None;
        crate::io::value_hash(&c)
    }
}

/// JSON schema of [`RunConfig`].
pub fn schema() -> schemars::schema::RootSchema {
    schemars::schema_for!(RunConfig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[data]\nscenes = 100\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.data.scenes, 100);
        assert_eq!(c.reward.w, 2.5);
    }

    #[test]
    fn bad_ratios_and_unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[data.split]\ntrain = 0.8\nval = 0.3\ntest = 0.1\n").is_err());
        assert!(RunConfig::from_toml("sede = 3\n").is_err());
    }

    #[test]
    fn out_dir_does_not_change_hash() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: Some("elsewhere".into()),
            ..RunConfig::default()
        };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert!(serde_json::to_string(&schema()).unwrap().contains("discriminator"));
    }
}
