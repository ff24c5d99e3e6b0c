//! Symmetric InfoNCE split into its image-to-text and text-to-image halves.
//!
//! Each half is a mean over the batch, so the equal-weight baseline
//! `0.5·l_i2t + 0.5·l_t2i` is the average of the two directions.

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_transposed, transpose_matmul, Matrix};
use crate::scheduler::LossWeights;

/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 0.05;

/// `s[i][j] = cos(image_i, text_j)` together with the temperature used to
/// turn scores into logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    s: Matrix,
    tau: f64,
}

impl SimilarityMatrix {
    pub fn new(s: Matrix, tau: f64) -> Result<Self> {
        if s.rows() != s.cols() {
            return Err(Error::DimensionMismatch {
                op: "SimilarityMatrix::new",
                detail: format!("{}x{} is not square", s.rows(), s.cols()),
            });
        }
        if s.rows() == 0 {
            return Err(Error::Empty("similarity matrix"));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("tau", format!("must be positive, got {tau}")));
        }
        Ok(Self { s, tau })
    }

    pub fn scores(&self) -> &Matrix {
        &self.s
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.s.rows() == 0
    }

    /// Row `i` softmax over texts, `p_row(i, ·)`.
    pub(crate) fn row_softmax(&self) -> Matrix {
        let n = self.len();
        let mut p = self.s.clone();
        for i in 0..n {
            softmax_in_place(p.row_mut(i), self.tau);
        }
        p
    }

    /// Column `j` softmax over images, stored at `p_col(i, j)`.
    pub(crate) fn column_softmax(&self) -> Matrix {
        let mut t = self.s.transpose();
        for j in 0..t.rows() {
            softmax_in_place(t.row_mut(j), self.tau);
        }
        t.transpose()
    }
}

fn softmax_in_place(v: &mut [f64], tau: f64) {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / tau));
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x / tau - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

fn lse(v: impl Iterator<Item = f64> + Clone, tau: f64) -> f64 {
    let max = v.clone().fold(f64::NEG_INFINITY, |m, x| m.max(x / tau));
    max + v.map(|x| (x / tau - max).exp()).sum::<f64>().ln()
}

/// Loss values for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub total: f64,
    pub w_i: f64,
    pub w_t: f64,
}

/// Cosine similarities of already-normalized embeddings.
pub fn similarity_matrix(emb_img: &Matrix, emb_txt: &Matrix, tau: f64) -> Result<SimilarityMatrix> {
    if emb_img.rows() == 0 {
        return Err(Error::Empty("similarity batch"));
    }
    if emb_img.shape() != emb_txt.shape() {
        return Err(Error::DimensionMismatch {
            op: "similarity_matrix",
            detail: format!("{:?} vs {:?}", emb_img.shape(), emb_txt.shape()),
        });
    }
    SimilarityMatrix::new(matmul_transposed(emb_img, emb_txt)?, tau)
}

/// `(l_i2t, l_t2i)`, each `-(1/N) Σ log p(correct)` with log-sum-exp.
pub fn infonce_components(sim: &SimilarityMatrix) -> (f64, f64) {
    let n = sim.len();
    let s = &sim.s;
    let tau = sim.tau;
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for i in 0..n {
        let pos = s.get(i, i) / tau;
        i2t += lse(s.row(i).iter().copied(), tau) - pos;
        t2i += lse((0..n).map(|r| s.get(r, i)), tau) - pos;
    }
    let n = n as f64;
    ((i2t / n).max(0.0), (t2i / n).max(0.0))
}

pub fn weighted_total(l_i2t: f64, l_t2i: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_i2t,
        l_t2i,
        total: weights.w_i * l_i2t + weights.w_t * l_t2i,
        w_i: weights.w_i,
        w_t: weights.w_t,
    }
}

/// `∂L_total/∂s` for the weighted loss.
///
/// `d_s[i][j] = (w_i·(p_row − δ) + w_t·(p_col − δ)) / (Nτ)`.
pub fn loss_gradient(sim: &SimilarityMatrix, weights: &LossWeights) -> Matrix {
    let n = sim.len();
    let p_row = sim.row_softmax();
    let p_col = sim.column_softmax();
    let scale = 1.0 / (n as f64 * sim.tau);
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            let g = weights.w_i * (p_row.get(i, j) - delta) + weights.w_t * (p_col.get(i, j) - delta);
            d.set(i, j, g * scale);
        }
    }
    d
}

/// Chains `∂L/∂s` into the two embedding batches: `(d_s·E_txt, d_sᵀ·E_img)`.
pub fn embedding_gradients(d_s: &Matrix, emb_img: &Matrix, emb_txt: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((matmul(d_s, emb_txt)?, transpose_matmul(d_s, emb_img)?))
}
