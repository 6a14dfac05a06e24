//! Synthetic captioning world, vocabulary and dataset splits.

mod split;
mod vocab;
mod world;

use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

pub use split::{make_splits, DatasetSplit, SplitConfig};
pub use vocab::{TokenSequence, Vocabulary, BOS, EOS, PAD};
pub use world::{
    color_object_pairs, generate_scene, generate_with_symbols, Domain, Features, SceneInstance,
    SceneLayout, SceneObject, SymbolTable, WorldConfig, REFS_PER_SCENE,
};

use crate::error::{Error, Result};
use crate::{io, seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// In-domain scenes, divided into train/val/test.
    pub scenes: usize,
    /// Extra scenes drawn from the held-out (color, object) pairs.
    pub shifted_scenes: usize,
    pub split: SplitConfig,
    /// Maximum generated tokens per caption, EOS included.
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 2500,
            shifted_scenes: 250,
            split: SplitConfig::default(),
            max_len: 20,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if self.scenes == 0 {
            return Err(Error::Config("data.scenes must be positive".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("data.max_len must be at least 2".into()));
        }
        let (train, val, _) = self.split.sizes(self.scenes);
        if train == 0 || val == 0 {
            return Err(Error::Config("train and val splits must be non-empty".into()));
        }
        Ok(())
    }
}

/// Persisted form of a scene; features are re-derived from `seed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: u64,
    pub seed: u64,
    pub references: Vec<String>,
}

impl From<&SceneInstance> for SceneRecord {
    fn from(s: &SceneInstance) -> Self {
        Self {
            id: s.id,
            seed: s.seed,
            references: s.references.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub world: WorldConfig,
    pub vocab: Vocabulary,
    pub split: DatasetSplit,
    pub train: Vec<SceneInstance>,
    pub val: Vec<SceneInstance>,
    pub test: Vec<SceneInstance>,
    pub shifted: Vec<SceneInstance>,
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const SHIFTED_FILE: &str = "shifted.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SPLITS_FILE: &str = "splits.json";

pub fn scene_seed(root: u64, id: u64) -> u64 {
    seed::derive_indexed(root, "scene", id)
}

impl Dataset {
    pub fn generate(world: &WorldConfig, cfg: &DataConfig, root_seed: u64) -> Result<Self> {
        world.validate()?;
        cfg.validate()?;
        let shifted_world = world.shifted();
        if cfg.shifted_scenes > 0 {
            shifted_world.validate()?;
        }
        let symbols = SymbolTable::new(world);
        let ids: Vec<u64> = (0..cfg.scenes as u64).collect();
        let split = make_splits(&ids, &cfg.split, seed::derive(root_seed, "data"))?;
        let gen = |list: &[u64], w: &WorldConfig| -> Vec<SceneInstance> {
            list.iter()
                .map(|&id| generate_with_symbols(id, scene_seed(root_seed, id), w, &symbols))
                .collect()
        };
        let train = gen(&split.train, world);
        let val = gen(&split.val, world);
        let test = gen(&split.test, world);
        let shifted_ids: Vec<u64> =
            (cfg.scenes as u64..(cfg.scenes + cfg.shifted_scenes) as u64).collect();
        let shifted = gen(&shifted_ids, &shifted_world);
        let vocab = Vocabulary::build(train.iter().flat_map(|s| s.references.iter().map(String::as_str)));
        Ok(Self {
            world: world.clone(),
            vocab,
            split,
            train,
            val,
            test,
            shifted,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (name, scenes) in [
            (TRAIN_FILE, &self.train),
            (VAL_FILE, &self.val),
            (TEST_FILE, &self.test),
            (SHIFTED_FILE, &self.shifted),
        ] {
            let path = dir.join(name);
            let records: Vec<SceneRecord> = scenes.iter().map(SceneRecord::from).collect();
            io::write_jsonl(&path, &records)?;
            written.push(path);
        }
        let vocab_path = dir.join(VOCAB_FILE);
        io::write_string(&vocab_path, &self.vocab.to_lines())?;
        written.push(vocab_path);
        let split_path = dir.join(SPLITS_FILE);
        io::write_json(&split_path, &self.split)?;
        written.push(split_path);
        Ok(written)
    }

    /// Loads persisted splits, regenerating features from each scene's seed
    /// and checking the stored references against the regenerated ones.
    pub fn load(dir: &Path, world: &WorldConfig) -> Result<Self> {
        world.validate()?;
        let symbols = SymbolTable::new(world);
        let shifted_world = world.shifted();
        let load = |name: &str, w: &WorldConfig| -> Result<Vec<SceneInstance>> {
            let records: Vec<SceneRecord> = io::read_jsonl(&dir.join(name))?;
            records
                .into_iter()
                .map(|r| {
                    let scene = generate_with_symbols(r.id, r.seed, w, &symbols);
                    if scene.references.as_slice() != r.references.as_slice() {
                        return Err(Error::InvalidInput(format!(
                            "{name}: scene {} does not regenerate from seed {}",
                            r.id, r.seed
                        )));
                    }
                    Ok(scene)
                })
                .collect()
        };
        let vocab = Vocabulary::from_lines(&io::read_string(&dir.join(VOCAB_FILE))?)?;
        Ok(Self {
            world: world.clone(),
            vocab,
            split: io::read_json(&dir.join(SPLITS_FILE))?,
            train: load(TRAIN_FILE, world)?,
            val: load(VAL_FILE, world)?,
            test: load(TEST_FILE, world)?,
            shifted: load(SHIFTED_FILE, &shifted_world)?,
        })
    }

    pub fn split_by_name(&self, name: &str) -> Result<&[SceneInstance]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            "shifted" => Ok(&self.shifted),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }

    /// References of a scene as token sequences.
    pub fn references(&self, scene: &SceneInstance) -> Result<Vec<TokenSequence>> {
        scene.references.iter().map(|r| self.vocab.encode(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            scenes: 200,
            shifted_scenes: 40,
            ..DataConfig::default()
        }
    }

    #[test]
    fn vocabulary_closes_over_every_split() {
        let d = Dataset::generate(&WorldConfig::default(), &small(), 5).unwrap();
        for scene in d.train.iter().chain(&d.val).chain(&d.test).chain(&d.shifted) {
            for r in &scene.references {
                assert!(d.vocab.encode(r).is_ok(), "{r}");
            }
        }
    }

    #[test]
    fn thousand_seeds_close_over_vocabulary() {
        let world = WorldConfig::default();
        let symbols = SymbolTable::new(&world);
        let scenes: Vec<_> = (0..1000)
            .map(|i| generate_with_symbols(i, i * 17 + 3, &world, &symbols))
            .collect();
        let vocab = Vocabulary::build(scenes.iter().flat_map(|s| s.references.iter().map(String::as_str)));
        for s in &scenes {
            assert_eq!(s.references.len(), REFS_PER_SCENE);
            for r in &s.references {
                for w in r.split_whitespace() {
                    assert!(vocab.id(w).is_some(), "{w}");
                }
            }
        }
    }

    #[test]
    fn shifted_pairs_never_seen_in_train() {
        let d = Dataset::generate(&WorldConfig::default(), &small(), 9).unwrap();
        let train = color_object_pairs(&d.train);
        let shifted = color_object_pairs(&d.shifted);
        assert!(!shifted.is_empty());
        assert!(train.intersection(&shifted).next().is_none());
    }

    #[test]
    fn write_load_round_trip_is_byte_stable() {
        let world = WorldConfig::default();
        let d = Dataset::generate(&world, &small(), 11).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        d.write(a.path()).unwrap();
        Dataset::generate(&world, &small(), 11).unwrap().write(b.path()).unwrap();
        for f in [TRAIN_FILE, VAL_FILE, TEST_FILE, SHIFTED_FILE, VOCAB_FILE, SPLITS_FILE] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
        let loaded = Dataset::load(a.path(), &world).unwrap();
        assert_eq!(loaded.train, d.train);
        assert_eq!(loaded.shifted, d.shifted);
        assert_eq!(loaded.vocab, d.vocab);
    }
}
