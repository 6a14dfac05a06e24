use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::log_softmax_last;

use super::{EmbeddingMatrix, SimilarityMatrix};

/// Cosine similarity matrix `S[i][j] = <T_i, V_j>` of unit-norm rows.
pub fn similarity(texts: &EmbeddingMatrix, images: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    let (t, v) = (texts.as_tensor(), images.as_tensor());
    let (_, dt) = t.dims2()?;
    let (_, dv) = v.dims2()?;
    if dt != dv {
        return Err(Error::Shape(format!(
            "embedding dims differ: texts {dt}, images {dv}"
        )));
    }
    Ok(SimilarityMatrix(t.matmul(&v.t()?)?))
}

/// `-mean_i log softmax(logits[i, :])[target_i]` for `targets[i] = i`.
fn diagonal_cross_entropy(logits: &Tensor) -> Result<Tensor> {
    let (rows, cols) = logits.dims2()?;
    let eye = Tensor::eye(cols, logits.dtype(), &Device::Cpu)?.narrow(0, 0, rows)?;
    let lp = log_softmax_last(logits)?;
    Ok(((lp * eye)?.sum_all()?.neg()? / rows as f64)?)
}

/// Symmetric contrastive loss of a paired batch: the mean of row-wise and
/// column-wise cross-entropy with the diagonal as targets, on
/// `logit_scale * S`.
pub fn clip_contrastive_loss(s: &Tensor, logit_scale: &Tensor) -> Result<Tensor> {
    let (n, m) = s.dims2()?;
    if n != m {
        return Err(Error::Shape(format!("contrastive loss needs a square matrix, got {n}x{m}")));
    }
    let logits = s.broadcast_mul(&logit_scale.to_dtype(s.dtype())?.reshape(())?)?;
    let rows = diagonal_cross_entropy(&logits)?;
    let cols = diagonal_cross_entropy(&logits.t()?.contiguous()?)?;
    Ok(((rows + cols)? * 0.5)?)
}

/// Score of an image-caption pair: `w * max(0, sim)`.
pub fn reward_score(sim: f64, w: f64) -> f64 {
    w * sim.max(0.0)
}

/// Convenience for scalar logit scales.
pub fn scalar(value: f64, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::new(value, &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use candle_core::Var;

    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        let n = rows.len();
        let m = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (n, m), &Device::Cpu).unwrap()
    }

    fn loss_value(s: &Tensor, scale: f64) -> f64 {
        clip_contrastive_loss(s, &scalar(scale, DType::F64).unwrap())
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn uniform_logits_give_log_n() {
        let s = Tensor::full(0.3f64, (4, 4), &Device::Cpu).unwrap();
        assert!((loss_value(&s, 10.0) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_with_large_scale_vanishes() {
        let s = Tensor::eye(3, DType::F64, &Device::Cpu).unwrap();
        assert!(loss_value(&s, 1e4) < 1e-12);
        assert!(loss_value(&s, 100.0) < loss_value(&s, 10.0));
    }

    #[test]
    fn random_three_by_three_matches_scalar_arithmetic() {
        let rows = [[0.2, -0.5, 0.9], [0.7, 0.1, -0.3], [-0.8, 0.4, 0.6]];
        let scale = 3.0;
        let s = mat(&[&rows[0], &rows[1], &rows[2]]);
        let ce = |logits: [f64; 3], target: usize| {
            let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
            lse - logits[target]
        };
        let mut row_term = 0.0;
        let mut col_term = 0.0;
        for i in 0..3 {
            row_term += ce([scale * rows[i][0], scale * rows[i][1], scale * rows[i][2]], i) / 3.0;
            col_term += ce([scale * rows[0][i], scale * rows[1][i], scale * rows[2][i]], i) / 3.0;
        }
        let expected = 0.5 * (row_term + col_term);
        assert!((loss_value(&s, scale) - expected).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_square() {
        let s = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(clip_contrastive_loss(&s, &scalar(1.0, DType::F64).unwrap()).is_err());
    }

    #[test]
    fn gradient_flows_to_scale() {
        let s = mat(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let scale = Var::new(5f64, &Device::Cpu).unwrap();
        let loss = clip_contrastive_loss(&s, scale.as_tensor()).unwrap();
        let g = loss.backward().unwrap();
        assert!(g.get(scale.as_tensor()).unwrap().to_scalar::<f64>().unwrap() < 0.0);
    }

    #[test]
    fn reward_clamps_and_scales() {
        assert_eq!(reward_score(-0.3, 2.5), 0.0);
        assert!((reward_score(0.5, 2.5) - 1.25).abs() < 1e-15);
        assert!((reward_score(1.0, 2.5) - 2.5).abs() < 1e-15);
    }
}
