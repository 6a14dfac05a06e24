use std::collections::HashSet;

use super::ngrams::tokens;
use crate::error::{Error, Result};

/// Repeated n-grams within one caption: total minus distinct.
pub fn repeated_ngrams(caption: &str, n: usize) -> usize {
    let toks = tokens(caption);
    if toks.len() < n {
        return 0;
    }
    let total = toks.len() + 1 - n;
    let distinct: HashSet<&[&str]> = toks.windows(n).collect();
    total - distinct.len()
}

/// Mean per-caption count of repeated n-grams.
pub fn rep_n<S: AsRef<str>>(captions: &[S], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidInput(format!("Rep-n needs n in 1..=4, got {n}")));
    }
    if captions.is_empty() {
        return Err(Error::InvalidInput("Rep-n over an empty corpus".into()));
    }
    let sum: usize = captions.iter().map(|c| repeated_ngrams(c.as_ref(), n)).sum();
    Ok(sum as f64 / captions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_convention() {
        assert_eq!(repeated_ngrams("background background background", 1), 2);
        assert_eq!(repeated_ngrams("background background background", 2), 1);
        assert_eq!(rep_n(&["a man with a dog"], 1).unwrap(), 1.0);
        for n in 1..=4 {
            assert_eq!(rep_n(&["one two three four five"], n).unwrap(), 0.0);
        }
    }

    #[test]
    fn order_invariant_mean() {
        let a = ["a a b", "c c c", "d"];
        let b = ["d", "c c c", "a a b"];
        assert_eq!(rep_n(&a, 1).unwrap(), rep_n(&b, 1).unwrap());
        assert!(rep_n(&a, 5).is_err());
        assert!(rep_n::<&str>(&[], 1).is_err());
    }
}
