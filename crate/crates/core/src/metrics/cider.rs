use std::collections::{HashMap, HashSet};

use super::ngrams::{ngram_counts, tokens};
use crate::error::{Error, Result};

pub const CIDER_MAX_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;

/// Document frequencies of n-grams, where each image's reference set counts
/// as one document.
#[derive(Debug, Clone)]
pub struct DocumentFrequencies {
    df: HashMap<Vec<String>, f64>,
    log_num_docs: f64,
}

impl DocumentFrequencies {
    pub fn from_reference_sets<S: AsRef<str>>(sets: &[Vec<S>]) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::InvalidInput("document frequencies need at least one image".into()));
        }
        let mut df: HashMap<Vec<String>, f64> = HashMap::new();
        for refs in sets {
            let mut seen: HashSet<Vec<&str>> = HashSet::new();
            for r in refs {
                let toks = tokens(r.as_ref());
                for n in 1..=CIDER_MAX_N {
                    seen.extend(ngram_counts(&toks, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g.into_iter().map(str::to_owned).collect()).or_insert(0.0) += 1.0;
            }
        }
        Ok(Self {
            df,
            log_num_docs: (sets.len() as f64).ln(),
        })
    }

    pub fn num_docs(&self) -> f64 {
        self.log_num_docs.exp()
    }

    fn idf(&self, gram: &[&str]) -> f64 {
        let key: Vec<String> = gram.iter().map(|s| (*s).to_owned()).collect();
        let df = self.df.get(&key).copied().unwrap_or(0.0);
        self.log_num_docs - df.max(1.0).ln()
    }

    fn vectors<'a>(&self, toks: &[&'a str]) -> Vec<(HashMap<Vec<&'a str>, f64>, f64)> {
        (1..=CIDER_MAX_N)
            .map(|n| {
                let vec: HashMap<_, f64> = ngram_counts(toks, n)
                    .into_iter()
                    .map(|(g, tf)| {
                        let w = tf as f64 * self.idf(&g);
                        (g, w)
                    })
                    .collect();
                let norm = vec.values().map(|v| v * v).sum::<f64>().sqrt();
                (vec, norm)
            })
            .collect()
    }
}

/// CIDEr-D of one candidate against its references, scaled by 10.
pub fn cider_d<S: AsRef<str>>(candidate: &str, references: &[S], df: &DocumentFrequencies) -> Result<f64> {
    let cand = tokens(candidate);
    if cand.is_empty() {
        return Err(Error::InvalidInput("CIDEr-D candidate is empty".into()));
    }
    if references.is_empty() {
        return Err(Error::InvalidInput("CIDEr-D needs at least one reference".into()));
    }
    let cv = df.vectors(&cand);
    let mut total = 0.0;
    for r in references {
        let rt = tokens(r.as_ref());
        let rv = df.vectors(&rt);
        let delta = cand.len() as f64 - rt.len() as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut per_n = 0.0;
        for ((hv, hn), (refv, rn)) in cv.iter().zip(&rv) {
            let mut val: f64 = hv
                .iter()
                .filter_map(|(g, &h)| refv.get(g).map(|&r| h.min(r) * r))
                .sum();
            if *hn != 0.0 && *rn != 0.0 {
                val /= hn * rn;
            }
            per_n += val * penalty;
        }
        total += per_n / CIDER_MAX_N as f64;
    }
    Ok(10.0 * total / references.len() as f64)
}

/// Mean CIDEr-D over a corpus of (candidate, references) pairs.
pub fn corpus_cider<S: AsRef<str>>(pairs: &[(&str, &[S])], df: &DocumentFrequencies) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("CIDEr-D over an empty corpus".into()));
    }
    let mut sum = 0.0;
    for (c, r) in pairs {
        sum += cider_d(c, r, df)?;
    }
    Ok(sum / pairs.len() as f64)
}
