use std::collections::HashMap;

/// Counts of every n-gram of exactly length `n`.
pub fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.to_vec()).or_insert(0) += 1;
    }
    out
}

pub fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}
