//! Hard-negative captions: self-generated ones mined from reward-hacked
//! captioners, and manual corruptions of references.

mod corrupt;

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

pub use corrupt::{
    corrupt, repeat_final, swap_positions, CorruptionMode, CorruptionSpec, MIN_CORRUPTIBLE_LEN,
};

use crate::captioner::{beam_search, caption_scenes, Captioner};
use crate::data::{SceneInstance, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::seed;

/// How a mined negative was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinedFrom {
    Greedy,
    /// The greedy caption equalled a reference; best differing beam candidate.
    Beam,
    /// No beam candidate differed from the references; final word repeated.
    RepeatFinal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeSource {
    pub a_ckpt_hash: String,
    pub b_ckpt_hash: String,
    #[serde(default = "greedy")]
    pub z1_from: MinedFrom,
    #[serde(default = "greedy")]
    pub z2_from: MinedFrom,
}

fn greedy() -> MinedFrom {
    MinedFrom::Greedy
}

/// Two negatives for one scene; both differ from every reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeSet {
    pub scene_id: u64,
    pub z1: String,
    pub z2: String,
    pub source: NegativeSource,
}

/// One manual corruption of a reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub scene_id: u64,
    pub mode: CorruptionMode,
    pub text: String,
}

const FALLBACK_BEAM: usize = 5;

fn matches_reference(text: &str, scene: &SceneInstance) -> bool {
    scene.references.iter().any(|r| r == text)
}

fn fallback(
    model: &Captioner,
    vocab: &Vocabulary,
    scene: &SceneInstance,
    greedy_caption: &TokenSequence,
) -> Result<(String, MinedFrom)> {
    let memory = model.encode_scenes(&[scene])?;
    let beams = beam_search(model, vocab, &memory, FALLBACK_BEAM)?;
    if let Some(c) = beams[0].sequences.iter().find(|c| !matches_reference(&c.text, scene)) {
        return Ok((c.text.clone(), MinedFrom::Beam));
    }
    let content = repeat_final(&greedy_caption.content(), 2);
    Ok((vocab.detokenize(&content), MinedFrom::RepeatFinal))
}

fn mine_one(
    model: &Captioner,
    vocab: &Vocabulary,
    scenes: &[&SceneInstance],
    batch: usize,
) -> Result<Vec<(String, MinedFrom)>> {
    let greedy = caption_scenes(model, vocab, scenes, 1, batch)?;
    scenes
        .iter()
        .zip(greedy)
        .map(|(scene, c)| {
            if matches_reference(&c.text, scene) {
                fallback(model, vocab, scene, &c)
            } else {
                Ok((c.text, MinedFrom::Greedy))
            }
        })
        .collect()
}

/// Greedy-decodes one caption per scene from each captioner. A caption
/// that equals a reference is replaced by the best differing beam
/// candidate so both negatives always differ from the references.
pub fn mine_self_negatives(
    scenes: &[&SceneInstance],
    captioner_a: (&Captioner, &str),
    captioner_b: (&Captioner, &str),
    vocab: &Vocabulary,
    batch: usize,
) -> Result<Vec<NegativeSet>> {
    let a = mine_one(captioner_a.0, vocab, scenes, batch)?;
    let b = mine_one(captioner_b.0, vocab, scenes, batch)?;
    let out: Vec<NegativeSet> = scenes
        .iter()
        .zip(a.into_iter().zip(b))
        .map(|(scene, ((z1, z1_from), (z2, z2_from)))| NegativeSet {
            scene_id: scene.id,
            z1,
            z2,
            source: NegativeSource {
                a_ckpt_hash: captioner_a.1.to_owned(),
                b_ckpt_hash: captioner_b.1.to_owned(),
                z1_from,
                z2_from,
            },
        })
        .collect();
    if out.iter().all(|n| n.z1 == n.z2) {
        warn!("both captioners produced identical negatives for every scene");
    }
    Ok(out)
}

/// Two corruptions of each scene's references, modes cycling through
/// `modes`. Seeds derive from `root_seed` and the scene id.
pub fn manual_negatives(
    scenes: &[&SceneInstance],
    vocab: &Vocabulary,
    modes: &[CorruptionMode],
    root_seed: u64,
) -> Result<Vec<NegativeSet>> {
    if modes.is_empty() {
        return Err(Error::Config("manual negatives need at least one corruption mode".into()));
    }
    let mut out = Vec::with_capacity(scenes.len());
    for (k, scene) in scenes.iter().enumerate() {
        let mut z = Vec::with_capacity(2);
        for slot in 0..2u64 {
            let reference = vocab.encode(&scene.references[slot as usize])?;
            let spec = CorruptionSpec {
                mode: modes[(2 * k + slot as usize) % modes.len()],
                seed: seed::derive_indexed(root_seed, "corrupt", scene.id * 2 + slot),
            };
            z.push(corrupt(&reference, spec, vocab)?.text);
        }
        let z2 = z.pop().expect("two corruptions");
        let z1 = z.pop().expect("two corruptions");
        out.push(NegativeSet {
            scene_id: scene.id,
            z1,
            z2,
            source: NegativeSource {
                a_ckpt_hash: "manual".to_owned(),
                b_ckpt_hash: "manual".to_owned(),
                z1_from: MinedFrom::Greedy,
                z2_from: MinedFrom::Greedy,
            },
        });
    }
    Ok(out)
}

/// Negatives indexed by scene id; duplicate ids are an error.
pub fn index_negatives(sets: &[NegativeSet]) -> Result<BTreeMap<u64, &NegativeSet>> {
    let mut out = BTreeMap::new();
    for s in sets {
        if out.insert(s.scene_id, s).is_some() {
            return Err(Error::InvalidInput(format!("scene {} has two negative sets", s.scene_id)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::{CaptionerConfig, CaptionerShape};
    use crate::data::{generate_scene, WorldConfig};

    fn setup() -> (Vec<SceneInstance>, Vocabulary, Captioner) {
        let world = WorldConfig::default();
        let scenes: Vec<SceneInstance> = (0..4).map(|i| generate_scene(i, 50 + i, &world).unwrap()).collect();
        let vocab = Vocabulary::build(scenes.iter().flat_map(|s| s.references.iter().map(String::as_str)));
        let shape = CaptionerShape {
            config: CaptionerConfig {
                hidden: 16,
                heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                ..CaptionerConfig::default()
            },
            vocab_size: vocab.len(),
            num_slots: world.num_slots,
            feature_dim: world.feature_dim,
            max_len: 6,
        };
        let model = Captioner::new(shape, 3).unwrap();
        (scenes, vocab, model)
    }

    #[test]
    fn identical_captioners_give_equal_negatives_deterministically() {
        let (scenes, vocab, model) = setup();
        let refs: Vec<&SceneInstance> = scenes.iter().collect();
        let a = mine_self_negatives(&refs, (&model, "h"), (&model, "h"), &vocab, 2).unwrap();
        let b = mine_self_negatives(&refs, (&model, "h"), (&model, "h"), &vocab, 3).unwrap();
        assert_eq!(a, b);
        for (n, s) in a.iter().zip(&scenes) {
            assert_eq!(n.z1, n.z2);
            assert_eq!(n.scene_id, s.id);
            assert!(!matches_reference(&n.z1, s));
        }
    }

    #[test]
    fn jsonl_round_trip_keeps_provenance() {
        let (scenes, vocab, _) = setup();
        let refs: Vec<&SceneInstance> = scenes.iter().collect();
        let sets = manual_negatives(&refs, &vocab, &CorruptionMode::ALL, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("neg.jsonl");
        crate::io::write_jsonl(&path, &sets).unwrap();
        let back: Vec<NegativeSet> = crate::io::read_jsonl(&path).unwrap();
        assert_eq!(back, sets);
        for (n, s) in sets.iter().zip(&scenes) {
            assert!(!matches_reference(&n.z1, s) || !matches_reference(&n.z2, s));
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"a_ckpt_hash\""));
    }

    #[test]
    fn duplicate_scene_is_rejected() {
        let n = NegativeSet {
            scene_id: 1,
            z1: "a".into(),
            z2: "b".into(),
            source: NegativeSource {
                a_ckpt_hash: String::new(),
                b_ckpt_hash: String::new(),
                z1_from: MinedFrom::Greedy,
                z2_from: MinedFrom::Greedy,
            },
        };
        assert!(index_negatives(&[n.clone(), n]).is_err());
    }
}
