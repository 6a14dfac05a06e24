use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mrr: f64,
}

/// 1-based rank of image `target` for one caption's similarity row; ties go
/// to the lower image index.
pub fn rank_of(row: &[f64], target: usize) -> usize {
    let t = row[target];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

/// Text-to-image retrieval where caption `i` describes image `i`.
/// `sims[i][j]` is the similarity of caption `i` and image `j`.
pub fn retrieval_eval(sims: &[Vec<f64>]) -> Result<RetrievalScores> {
    let n = sims.len();
    if n == 0 {
        return Err(Error::InvalidInput("retrieval over zero captions".into()));
    }
    if let Some(row) = sims.iter().find(|r| r.len() != n) {
        return Err(Error::Shape(format!(
            "{n} captions but a similarity row covers {} images",
            row.len()
        )));
    }
    let ranks: Vec<usize> = sims.iter().enumerate().map(|(i, r)| rank_of(r, i)).collect();
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    Ok(RetrievalScores {
        r1: recall(1),
        r5: recall(5),
        r10: recall(10),
        mrr: 100.0 * ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_perfect() {
        let sims: Vec<Vec<f64>> = (0..12)
            .map(|i| (0..12).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let s = retrieval_eval(&sims).unwrap();
        assert_eq!((s.r1, s.r5, s.r10, s.mrr), (100.0, 100.0, 100.0, 100.0));
    }

    #[test]
    fn reversed_diagonal_three_items() {
        // caption i prefers image 2-i
        let sims = vec![
            vec![0.0, 0.5, 1.0],
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.5, 0.0],
        ];
        let s = retrieval_eval(&sims).unwrap();
        // ranks: 3, 1, 3
        assert!((s.r1 - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.r5, 100.0);
        assert!((s.mrr - 100.0 * (1.0 / 3.0 + 1.0 + 1.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_image_index() {
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 0), 1);
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 2), 3);
    }

    #[test]
    fn mismatch_is_error() {
        assert!(retrieval_eval(&[vec![1.0, 0.0]]).is_err());
        assert!(retrieval_eval(&[]).is_err());
    }
}
