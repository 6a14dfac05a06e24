use rand::Rng as _;
use rand::SeedableRng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Drop a non-empty suffix; the result has no EOS.
    Truncate,
    /// Repeat the last word 2 or 3 more times.
    RepeatFinal,
    /// Append a copy of a random span of 2 to 4 words.
    DuplicateConcept,
    /// Exchange two positions holding different words.
    Swap,
    /// Replace one word with a different random vocabulary word.
    Substitute,
    /// Remove one or two random words.
    Drop,
}

impl CorruptionMode {
    pub const ALL: [CorruptionMode; 6] = [
        CorruptionMode::Truncate,
        CorruptionMode::RepeatFinal,
        CorruptionMode::DuplicateConcept,
        CorruptionMode::Swap,
        CorruptionMode::Substitute,
        CorruptionMode::Drop,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    pub seed: u64,
}

pub const MIN_CORRUPTIBLE_LEN: usize = 3;
const MAX_ATTEMPTS: usize = 64;

/// Exchanges content positions `i` and `j`.
pub fn swap_positions(content: &[u32], i: usize, j: usize) -> Vec<u32> {
    let mut out = content.to_vec();
    out.swap(i, j);
    out
}

/// Appends `k` copies of the last word.
pub fn repeat_final(content: &[u32], k: usize) -> Vec<u32> {
    let mut out = content.to_vec();
    if let Some(&last) = content.last() {
        out.extend(std::iter::repeat_n(last, k));
    }
    out
}

fn attempt(content: &[u32], mode: CorruptionMode, vocab: &Vocabulary, rng: &mut Rng) -> Result<Vec<u32>> {
    let n = content.len();
    Ok(match mode {
        CorruptionMode::Truncate => content[..rng.random_range(1..n)].to_vec(),
        CorruptionMode::RepeatFinal => repeat_final(content, rng.random_range(2..=3)),
        CorruptionMode::DuplicateConcept => {
            let len = rng.random_range(2..=n.min(4));
            let start = rng.random_range(0..=n - len);
            let mut out = content.to_vec();
            out.extend_from_slice(&content[start..start + len]);
            out
        }
        CorruptionMode::Swap => {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            swap_positions(content, i, j)
        }
        CorruptionMode::Substitute => {
            let first = Vocabulary::EOS_ID as usize + 1;
            if vocab.len() <= first {
                return Err(Error::InvalidInput("vocabulary has no words to substitute".into()));
            }
            let mut out = content.to_vec();
            let p = rng.random_range(0..n);
            out[p] = rng.random_range(first..vocab.len()) as u32;
            out
        }
        CorruptionMode::Drop => {
            let mut out = content.to_vec();
            for _ in 0..rng.random_range(1..=2) {
                out.remove(rng.random_range(0..out.len()));
            }
            out
        }
    })
}

/// Applies `spec` to `caption`, resampling until the result differs from
/// the source.
pub fn corrupt(caption: &TokenSequence, spec: CorruptionSpec, vocab: &Vocabulary) -> Result<TokenSequence> {
    let content = caption.content();
    if content.len() < MIN_CORRUPTIBLE_LEN {
        return Err(Error::InvalidInput(format!(
            "caption `{}` has {} words, corruption needs at least {MIN_CORRUPTIBLE_LEN}",
            caption.text,
            content.len()
        )));
    }
    let distinct = content.iter().any(|&t| t != content[0]);
    if spec.mode == CorruptionMode::Swap && !distinct {
        return Err(Error::InvalidInput(format!(
            "swap cannot change `{}`: all words are equal",
            caption.text
        )));
    }
    let mut rng = Rng::seed_from_u64(spec.seed);
    for _ in 0..MAX_ATTEMPTS {
        let out = attempt(&content, spec.mode, vocab, &mut rng)?;
        if out != content {
            let mut ids = Vec::with_capacity(out.len() + 2);
            ids.push(Vocabulary::BOS_ID);
            ids.extend_from_slice(&out);
            if spec.mode != CorruptionMode::Truncate {
                ids.push(Vocabulary::EOS_ID);
            }
            return Ok(TokenSequence {
                text: vocab.detokenize(&ids),
                ids,
            });
        }
    }
    Err(Error::InvalidInput(format!(
        "{:?} left `{}` unchanged after {MAX_ATTEMPTS} attempts",
        spec.mode, caption.text
    )))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["a man playing with a cat in the background", "red cube ball"])
    }

    #[test]
    fn repeat_final_background_example() {
        let v = vocab();
        let c = v.encode("a cat in the background").unwrap();
        let out = repeat_final(&c.content(), 2);
        assert_eq!(v.detokenize(&out), "a cat in the background background background");
    }

    #[test]
    fn swap_twice_is_identity() {
        let c = [5, 6, 7, 8];
        assert_eq!(swap_positions(&swap_positions(&c, 1, 3), 1, 3), c);
    }

    #[test]
    fn too_short_is_error() {
        let v = vocab();
        let c = v.encode("a cat").unwrap();
        let spec = CorruptionSpec { mode: CorruptionMode::Drop, seed: 1 };
        assert!(corrupt(&c, spec, &v).is_err());
        let same = v.encode("cat cat cat").unwrap();
        let spec = CorruptionSpec { mode: CorruptionMode::Swap, seed: 1 };
        assert!(corrupt(&same, spec, &v).is_err());
    }

    #[test]
    fn truncate_is_strict_prefix_without_eos() {
        let v = vocab();
        let c = v.encode("a man playing with a cat in the background").unwrap();
        for seed in 0..100 {
            let spec = CorruptionSpec { mode: CorruptionMode::Truncate, seed };
            let out = corrupt(&c, spec, &v).unwrap();
            assert!(out.ids.len() < c.ids.len() - 1);
            assert_eq!(&c.ids[..out.ids.len()], &out.ids[..]);
            assert_ne!(out.ids.last(), Some(&Vocabulary::EOS_ID));
        }
    }

    proptest! {
        #[test]
        fn every_mode_changes_the_caption(seed in 0u64..10_000, mode in 0usize..6, len in 3usize..10) {
            let v = vocab();
            let words: Vec<&str> = v.tokens()[3..].iter().map(String::as_str).cycle().skip(seed as usize % 7).take(len).collect();
            let c = v.encode(&words.join(" ")).unwrap();
            let spec = CorruptionSpec { mode: CorruptionMode::ALL[mode], seed };
            let out = corrupt(&c, spec, &v).unwrap();
            prop_assert_ne!(out.content(), c.content());
        }
    }
}
