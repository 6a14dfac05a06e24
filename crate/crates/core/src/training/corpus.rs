use crate::data::{SceneInstance, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::seed;

/// Scenes of one split with their references tokenized.
#[derive(Debug, Clone)]
pub struct CaptionCorpus<'a> {
    pub scenes: Vec<&'a SceneInstance>,
    pub references: Vec<Vec<TokenSequence>>,
}

impl<'a> CaptionCorpus<'a> {
    pub fn new(scenes: &'a [SceneInstance], vocab: &Vocabulary) -> Result<Self> {
        let references = scenes
            .iter()
            .map(|s| s.references.iter().map(|r| vocab.encode(r)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scenes: scenes.iter().collect(),
            references,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Reference strings per scene.
    pub fn reference_texts(&self) -> Vec<Vec<String>> {
        self.scenes.iter().map(|s| s.references.to_vec()).collect()
    }

    /// Content token ids of every reference, per scene.
    pub fn reference_content(&self) -> Vec<Vec<Vec<u32>>> {
        self.references
            .iter()
            .map(|rs| rs.iter().map(TokenSequence::content).collect())
            .collect()
    }
}

/// Scene indices for training step `step`: scenes are visited in epochs,
/// each epoch a fresh permutation derived from `seed` and the epoch index.
/// Stateless, so a resumed run draws the same batches.
pub fn epoch_batch(len: usize, batch: usize, step: usize, seed_root: u64) -> Result<Vec<usize>> {
    if len == 0 || batch == 0 {
        return Err(Error::InvalidInput("cannot draw a batch from an empty corpus".into()));
    }
    let batch = batch.min(len);
    let per_epoch = len / batch;
    let epoch = step / per_epoch;
    let offset = (step % per_epoch) * batch;
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = seed::rng_indexed(seed_root, "epoch", epoch as u64);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    Ok(order[offset..offset + batch].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_covers_every_scene_once() {
        let mut seen = vec![0; 10];
        for step in 0..5 {
            for i in epoch_batch(10, 2, step, 3).unwrap() {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(epoch_batch(10, 2, 7, 3).unwrap(), epoch_batch(10, 2, 7, 3).unwrap());
        assert!(epoch_batch(0, 2, 0, 3).is_err());
    }
}
