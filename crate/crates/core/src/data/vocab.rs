use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Ordered token inventory. Sentinels occupy indices 0..3, words follow in
/// lexicographic order.
#[derive(Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocabulary")
            .field("size", &self.tokens.len())
            .finish()
    }
}

impl Vocabulary {
    pub const PAD_ID: u32 = 0;
    pub const BOS_ID: u32 = 1;
    pub const EOS_ID: u32 = 2;

    /// Builds a vocabulary from whitespace-tokenized sentences. The result
    /// does not depend on the order of `corpus`.
    pub fn build<'a, I>(corpus: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let words: BTreeSet<&str> = corpus
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| !w.is_empty())
            .collect();
        Self::from_words(words.into_iter().map(str::to_owned))
    }

    fn from_words(words: impl Iterator<Item = String>) -> Self {
        let mut tokens = vec![PAD.to_owned(), BOS.to_owned(), EOS.to_owned()];
        tokens.extend(words.filter(|w| w != PAD && w != BOS && w != EOS));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Restores a vocabulary from its persisted one-token-per-line form.
    pub fn from_lines(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < 3 || tokens[0] != PAD || tokens[1] != BOS || tokens[2] != EOS {
            return Err(Error::InvalidInput(
                "vocabulary file must start with <pad>, <bos>, <eos>".into(),
            ));
        }
        let vocab = Self::from_words(tokens[3..].iter().cloned());
        if vocab.tokens != tokens {
            return Err(Error::InvalidInput(
                "vocabulary file has duplicate or unsorted tokens".into(),
            ));
        }
        Ok(vocab)
    }

    pub fn to_lines(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_sentinel(id: u32) -> bool {
        id <= Self::EOS_ID
    }

    /// Wraps a sentence in BOS/EOS.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = vec![Self::BOS_ID];
        for word in text.split_whitespace() {
            ids.push(
                self.id(word)
                    .ok_or_else(|| Error::UnknownToken(word.to_owned()))?,
            );
        }
        ids.push(Self::EOS_ID);
        Ok(TokenSequence {
            ids,
            text: text.split_whitespace().collect::<Vec<_>>().join(" "),
        })
    }

    /// Builds a sequence from raw ids (BOS expected first), stopping at EOS.
    pub fn sequence_from_ids(&self, ids: &[u32]) -> Result<TokenSequence> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= self.len() {
                return Err(Error::InvalidInput(format!(
                    "token id {id} outside vocabulary of size {}",
                    self.len()
                )));
            }
            out.push(id);
            if id == Self::EOS_ID {
                break;
            }
        }
        let text = self.detokenize(&out);
        Ok(TokenSequence { ids: out, text })
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !Self::is_sentinel(id))
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A caption as vocabulary indices. Complete sequences start with BOS and
/// end with EOS; sequences cut at the decoding limit lack the final EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub text: String,
}

impl TokenSequence {
    pub fn is_complete(&self) -> bool {
        self.ids.first() == Some(&Vocabulary::BOS_ID) && self.ids.last() == Some(&Vocabulary::EOS_ID)
    }

    /// Word tokens without sentinels.
    pub fn content(&self) -> Vec<u32> {
        self.ids
            .iter()
            .copied()
            .filter(|&id| !Vocabulary::is_sentinel(id))
            .collect()
    }

    /// Tokens after BOS, i.e. what a decoder is trained to emit.
    pub fn targets(&self) -> &[u32] {
        match self.ids.first() {
            Some(&Vocabulary::BOS_ID) => &self.ids[1..],
            _ => &self.ids,
        }
    }

    pub fn words(&self) -> Vec<&str> {
        self.text.split_whitespace().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sentence_corpus() {
        let v = Vocabulary::build(["a dog", "a cat"]);
        assert_eq!(v.len(), 6);
        assert_eq!(&v.tokens()[3..], &["a", "cat", "dog"]);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as u32));
        }
        assert!(v.id("").is_none());
    }

    #[test]
    fn order_insensitive() {
        let a = Vocabulary::build(["a red cube", "the blue ball", "a cone"]);
        let b = Vocabulary::build(["a cone", "a red cube", "the blue ball"]);
        assert_eq!(a, b);
    }

    #[test]
    fn lines_round_trip() {
        let v = Vocabulary::build(["a small red cube"]);
        assert_eq!(Vocabulary::from_lines(&v.to_lines()).unwrap(), v);
        assert!(Vocabulary::from_lines("a\nb\n").is_err());
    }

    #[test]
    fn encode_wraps_with_sentinels() {
        let v = Vocabulary::build(["a dog"]);
        let s = v.encode("a dog").unwrap();
        assert!(s.is_complete());
        assert_eq!(s.targets().last(), Some(&Vocabulary::EOS_ID));
        assert_eq!(s.content().len(), 2);
        assert!(matches!(v.encode("a cat"), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn sequence_from_ids_stops_at_eos() {
        let v = Vocabulary::build(["a dog"]);
        let a = v.id("a").unwrap();
        let s = v
            .sequence_from_ids(&[Vocabulary::BOS_ID, a, Vocabulary::EOS_ID, a])
            .unwrap();
        assert_eq!(s.ids.len(), 3);
        assert_eq!(s.text, "a");
        assert!(v.sequence_from_ids(&[Vocabulary::BOS_ID, 99]).is_err());
    }
}
