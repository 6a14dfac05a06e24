//! Staged pipeline over a run directory with a hash-checked manifest.
//!
//! Layout: `data/`, `checkpoints/`, `negatives/`, `reports/`, `manifest/`.
//! Each stage records the hashes of the files it read and wrote; a stage
//! whose inputs and outputs are unchanged is skipped, and a stage whose
//! upstream has not completed fails naming the missing stage.

mod manifest;
pub mod stages;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use manifest::{RunManifest, StageRecord};
pub use stages::{captioner_shape, encoder_shape};

use crate::config::{NegativeSourceKind, RunConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::EvalReport;
use crate::training::RewardKind;

pub const CONFIG_FILE: &str = "config.toml";
pub const CONFIG_HASH_FILE: &str = "config.sha256";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    TrainXe,
    PretrainEncoder,
    TrainRewardCaptioner,
    MineNegatives,
    FinetuneDiscriminator,
    TrainScst(RewardKind),
    Evaluate,
}

impl Stage {
    pub fn key(self) -> String {
        match self {
            Stage::GenData => "gen-data".into(),
            Stage::TrainXe => "train-xe".into(),
            Stage::PretrainEncoder => "pretrain-encoder".into(),
            Stage::TrainRewardCaptioner => "train-reward-captioner".into(),
            Stage::MineNegatives => "mine-negatives".into(),
            Stage::FinetuneDiscriminator => "finetune-discriminator".into(),
            Stage::TrainScst(k) => format!("train-scst:{}", k.name()),
            Stage::Evaluate => "evaluate".into(),
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn upstream(self, cfg: &RunConfig) -> Vec<Stage> {
        match self {
            Stage::GenData => vec![],
            Stage::TrainXe | Stage::PretrainEncoder => vec![Stage::GenData],
            Stage::TrainRewardCaptioner => vec![Stage::GenData, Stage::TrainXe, Stage::PretrainEncoder],
            Stage::MineNegatives => match cfg.negatives.source {
                NegativeSourceKind::SelfGenerated => vec![Stage::GenData, Stage::TrainRewardCaptioner],
                NegativeSourceKind::Manual => vec![Stage::GenData],
            },
            Stage::FinetuneDiscriminator => vec![Stage::GenData, Stage::PretrainEncoder, Stage::MineNegatives],
            Stage::TrainScst(RewardKind::Cider) => vec![Stage::GenData, Stage::TrainXe],
            Stage::TrainScst(RewardKind::RawScore) => vec![Stage::GenData, Stage::TrainXe, Stage::PretrainEncoder],
            Stage::TrainScst(RewardKind::Discriminator) => {
                vec![Stage::GenData, Stage::TrainXe, Stage::FinetuneDiscriminator]
            }
            Stage::Evaluate => vec![Stage::GenData, Stage::TrainXe, Stage::PretrainEncoder],
        }
    }

    /// Every stage in execution order.
    pub fn full_pipeline() -> Vec<Stage> {
        vec![
            Stage::GenData,
            Stage::TrainXe,
            Stage::PretrainEncoder,
            Stage::TrainRewardCaptioner,
            Stage::MineNegatives,
            Stage::FinetuneDiscriminator,
            Stage::TrainScst(RewardKind::Cider),
            Stage::TrainScst(RewardKind::RawScore),
            Stage::TrainScst(RewardKind::Discriminator),
            Stage::Evaluate,
        ]
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gen-data" => Stage::GenData,
            "train-xe" => Stage::TrainXe,
            "pretrain-encoder" => Stage::PretrainEncoder,
            "train-reward-captioner" => Stage::TrainRewardCaptioner,
            "mine-negatives" => Stage::MineNegatives,
            "finetune-discriminator" => Stage::FinetuneDiscriminator,
            "evaluate" => Stage::Evaluate,
            "train-scst:cider" => Stage::TrainScst(RewardKind::Cider),
            "train-scst:raw_score" => Stage::TrainScst(RewardKind::RawScore),
            "train-scst:discriminator" => Stage::TrainScst(RewardKind::Discriminator),
            other => return Err(Error::InvalidInput(format!("unknown stage `{other}`"))),
        })
    }
}

/// Evaluation tag of an SCST reward kind.
pub fn scst_tag(kind: RewardKind) -> &'static str {
    match kind {
        RewardKind::Cider => "scst-cider",
        RewardKind::RawScore => "scst-raw",
        RewardKind::Discriminator => "scst-discriminator",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// False when the stage was already complete with identical hashes.
    pub ran: bool,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct Pipeline {
    cfg: RunConfig,
    root: PathBuf,
    manifest: RunManifest,
}

impl Pipeline {
    /// Opens (or initialises) a run directory. The directory keeps a frozen
    /// copy of the config; opening it with a different config is an error.
    pub fn open(cfg: RunConfig, root: &Path) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash()?;
        for sub in ["data", "checkpoints", "negatives", "reports", "manifest"] {
            std::fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
        }
        let hash_path = root.join("manifest").join(CONFIG_HASH_FILE);
        if hash_path.exists() {
            let existing = io::read_string(&hash_path)?.trim().to_owned();
            if existing != hash {
                return Err(Error::Config(format!(
                    "{} was created with config {existing}, current config is {hash}; use a new run directory",
                    root.display()
                )));
            }
        } else {
            io::write_string(&root.join(CONFIG_FILE), &cfg.to_toml()?)?;
            io::write_string(&hash_path, &format!("{hash}\n"))?;
        }
        let manifest = RunManifest::load_or_new(&root.join("manifest").join(MANIFEST_FILE), &hash)?;
        Ok(Self {
            cfg,
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub(crate) fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Verifies `stage` completed and its outputs are intact; returns the
    /// recorded output hashes.
    fn require(&self, needed_by: Stage, stage: Stage) -> Result<&BTreeMap<String, String>> {
        let record = self.manifest.stages.get(&stage.key()).ok_or_else(|| Error::MissingDependency {
            stage: needed_by.key(),
            missing: stage.key(),
            artifact: format!("manifest entry `{}`", stage.key()),
        })?;
        for (rel, h) in &record.outputs {
            let path = self.root.join(rel);
            if !path.exists() {
                return Err(Error::MissingDependency {
                    stage: needed_by.key(),
                    missing: stage.key(),
                    artifact: rel.clone(),
                });
            }
            let found = io::file_hash(&path)?;
            if &found != h {
                return Err(Error::HashMismatch {
                    artifact: rel.clone(),
                    expected: h.clone(),
                    found,
                });
            }
        }
        Ok(&record.outputs)
    }

    /// Recorded hash of an upstream output, for provenance tags.
    pub(crate) fn output_hash(&self, stage: Stage, rel: &str) -> Result<String> {
        self.manifest
            .stages
            .get(&stage.key())
            .and_then(|r| r.outputs.get(rel))
            .cloned()
            .ok_or_else(|| Error::MissingDependency {
                stage: "pipeline".into(),
                missing: stage.key(),
                artifact: rel.to_owned(),
            })
    }

    pub(crate) fn has_stage(&self, stage: Stage) -> bool {
        self.manifest.stages.contains_key(&stage.key())
    }

    /// Runs `stage` unless it already completed with identical input and
    /// output hashes.
    pub fn run_stage(&mut self, stage: Stage) -> Result<StageOutcome> {
        let mut inputs = BTreeMap::new();
        for up in stage.upstream(&self.cfg) {
            inputs.extend(self.require(stage, up)?.clone());
        }
        if stage == Stage::Evaluate {
            inputs.extend(self.optional_eval_inputs()?);
        }
        let params_hash = self.cfg.hash()?;
        if let Some(rec) = self.manifest.stages.get(&stage.key()) {
            if rec.inputs == inputs && rec.params_hash == params_hash && manifest::files_match(&self.root, &rec.outputs) {
                log::info!("{stage}: up to date");
                return Ok(StageOutcome {
                    stage,
                    ran: false,
                    outputs: rec.outputs.clone(),
                });
            }
        }
        log::info!("{stage}: running");
        let started = std::time::Instant::now();
        let files = stages::execute(self, stage)?;
        let seconds = started.elapsed().as_secs_f64();
        let outputs = manifest::hash_files(&self.root, &files)?;
        let completed_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.manifest.stages.insert(
            stage.key(),
            StageRecord {
                params_hash,
                inputs,
                outputs: outputs.clone(),
                completed_unix,
                seconds,
            },
        );
        self.manifest.save(&self.root.join("manifest").join(MANIFEST_FILE))?;
        Ok(StageOutcome { stage, ran: true, outputs })
    }

    /// Outputs of optional upstream stages that evaluation picks up when
    /// present.
    fn optional_eval_inputs(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for s in [
            Stage::FinetuneDiscriminator,
            Stage::TrainScst(RewardKind::Cider),
            Stage::TrainScst(RewardKind::RawScore),
            Stage::TrainScst(RewardKind::Discriminator),
        ] {
            if self.has_stage(s) {
                out.extend(self.require(Stage::Evaluate, s)?.clone());
            }
        }
        Ok(out)
    }

    /// Runs every stage in order and returns the evaluation reports.
    pub fn run_all(&mut self) -> Result<Vec<EvalReport>> {
        for stage in Stage::full_pipeline() {
            self.run_stage(stage)?;
        }
        self.reports()
    }

    /// Evaluation reports currently in the run directory, in tag order.
    pub fn reports(&self) -> Result<Vec<EvalReport>> {
        let mut out = Vec::new();
        for tag in stages::EVAL_TAGS {
            let p = self.path(&stages::eval_report_path(tag));
            if p.exists() {
                out.push(io::read_json(&p)?);
            }
        }
        Ok(out)
    }
}

/// Reads every `reports/eval-*.json` under each run directory. Reports of
/// differing schema versions are refused with the list of versions.
pub fn collect_reports(run_dirs: &[PathBuf]) -> Result<Vec<EvalReport>> {
    let mut raw: Vec<serde_json::Value> = Vec::new();
    for dir in run_dirs {
        let before = raw.len();
        for tag in stages::EVAL_TAGS {
            let p = dir.join(stages::eval_report_path(tag));
            if p.exists() {
                raw.push(io::read_json(&p)?);
            }
        }
        if raw.len() == before {
            return Err(Error::MissingDependency {
                stage: "report".into(),
                missing: Stage::Evaluate.key(),
                artifact: dir.join("reports").display().to_string(),
            });
        }
    }
    let mut versions: Vec<u32> = raw
        .iter()
        .map(|v| v["schema_version"].as_u64().unwrap_or(0) as u32)
        .collect();
    versions.sort_unstable();
    versions.dedup();
    if versions != [crate::metrics::REPORT_SCHEMA_VERSION] {
        return Err(Error::SchemaVersion(versions));
    }
    raw.into_iter()
        .map(|v| serde_json::from_value(v).map_err(Error::from))
        .collect()
}
