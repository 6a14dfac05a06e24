use super::ngrams::tokens;

pub const ROUGE_BETA: f64 = 1.2;

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with recall weighted by `beta`, maximised over references.
pub fn rouge_l<S: AsRef<str>>(candidate: &str, references: &[S]) -> f64 {
    let cand = tokens(candidate);
    if cand.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let rt = tokens(r.as_ref());
            let lcs = lcs_len(&cand, &rt) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let p = lcs / cand.len() as f64;
            let rec = lcs / rt.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_one_disjoint_is_zero() {
        assert!((rouge_l("a red cube", &["a red cube"]) - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l("a red cube", &["two blue balls"]), 0.0);
    }

    #[test]
    fn lcs_small_cases() {
        assert_eq!(lcs_len(&[1, 2, 3, 4], &[2, 4, 3]), 2);
        assert_eq!(lcs_len::<u8>(&[], &[1]), 0);
        assert_eq!(lcs_len(b"ABCBDAB", b"BDCABA"), 4);
    }
}
