use std::collections::HashMap;

use super::ngrams::{ngram_counts, tokens};
use crate::error::{Error, Result};

pub const BLEU_MAX_N: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct BleuStats {
    matches: [f64; BLEU_MAX_N],
    totals: [f64; BLEU_MAX_N],
    cand_len: f64,
    ref_len: f64,
}

fn stats<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<BleuStats> {
    let cand = tokens(candidate);
    if cand.is_empty() {
        return Err(Error::InvalidInput("BLEU candidate is empty".into()));
    }
    if references.is_empty() {
        return Err(Error::InvalidInput("BLEU needs at least one reference".into()));
    }
    let refs: Vec<Vec<&str>> = references.iter().map(|r| tokens(r.as_ref())).collect();
    let mut out = BleuStats {
        cand_len: cand.len() as f64,
        ..BleuStats::default()
    };
    // closest reference length, shorter wins ties
    let c = cand.len() as i64;
    out.ref_len = refs
        .iter()
        .map(|r| r.len() as i64)
        .min_by_key(|&l| ((l - c).abs(), l))
        .expect("non-empty") as f64;
    for n in 1..=BLEU_MAX_N {
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in &refs {
            for (g, k) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        let counts = ngram_counts(&cand, n);
        out.totals[n - 1] = counts.values().sum::<usize>() as f64;
        out.matches[n - 1] = counts
            .iter()
            .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum::<usize>() as f64;
    }
    Ok(out)
}

fn combine(s: &BleuStats) -> f64 {
    let mut log_sum = 0.0;
    for n in 0..BLEU_MAX_N {
        if s.matches[n] == 0.0 || s.totals[n] == 0.0 {
            return 0.0;
        }
        log_sum += (s.matches[n] / s.totals[n]).ln();
    }
    let bp = if s.cand_len < s.ref_len {
        (1.0 - s.ref_len / s.cand_len).exp()
    } else {
        1.0
    };
    bp * (log_sum / BLEU_MAX_N as f64).exp()
}

/// Sentence-level BLEU-4 without smoothing.
pub fn bleu4<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<f64> {
    Ok(combine(&stats(candidate, references)?))
}

/// Corpus-level BLEU-4: n-gram counts and lengths are summed before combining.
pub fn corpus_bleu4<S: AsRef<str>>(pairs: &[(&str, &[S])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("BLEU over an empty corpus".into()));
    }
    let mut acc = BleuStats::default();
    for (c, r) in pairs {
        let s = stats(c, r)?;
        for n in 0..BLEU_MAX_N {
            acc.matches[n] += s.matches[n];
            acc.totals[n] += s.totals[n];
        }
        acc.cand_len += s.cand_len;
        acc.ref_len += s.ref_len;
    }
    Ok(combine(&acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_is_one() {
        let s = bleu4("a red cube left of a ball", &["a red cube left of a ball", "x y"]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_four_gram_overlap_is_zero() {
        assert_eq!(bleu4("a red cube ball", &["a red cube left of a ball"]).unwrap(), 0.0);
        assert_eq!(bleu4("a red", &["a red"]).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty_applies() {
        // 4 of 4 grams match but candidate is shorter than the reference
        let s = bleu4("a b c d", &["a b c d e f"]).unwrap();
        assert!((s - (1.0f64 - 6.0 / 4.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn clipping_uses_max_reference_count() {
        // unigram "a" appears 5 times, max reference count 2
        let s = stats("a a a a a", &["a a b", "a c"]).unwrap();
        assert_eq!(s.matches[0], 2.0);
        assert_eq!(s.totals[0], 5.0);
    }
}
