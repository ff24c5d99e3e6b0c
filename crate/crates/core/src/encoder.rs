//! Dual linear projection heads with L2 normalization.
//!
//! Raw image and text feature rows are frozen inputs. Only the two projection
//! matrices learn; neither carries a bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{matmul_transposed, Matrix};

/// Projected rows with norm below this are treated as degenerate.
pub const MIN_PROJECTED_NORM: f64 = 1e-30;

/// `w_img` is `d × D_img`, `w_txt` is `d × D_txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderParams {
    pub w_img: Matrix,
    pub w_txt: Matrix,
}

/// Gradients shaped like [`DualEncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGradients {
    pub g_img: Matrix,
    pub g_txt: Matrix,
}

impl DualEncoderParams {
    pub fn new(w_img: Matrix, w_txt: Matrix) -> Result<Self> {
        if w_img.rows() != w_txt.rows() {
            return Err(Error::DimensionMismatch {
                op: "DualEncoderParams::new",
                detail: format!(
                    "image head has d={} but text head has d={}",
                    w_img.rows(),
                    w_txt.rows()
                ),
            });
        }
        if w_img.rows() < 2 || w_img.cols() < 1 || w_txt.cols() < 1 {
            return Err(Error::invalid(
                "params",
                format!(
                    "need d >= 2 and input dims >= 1, got d={} D_img={} D_txt={}",
                    w_img.rows(),
                    w_img.cols(),
                    w_txt.cols()
                ),
            ));
        }
        Ok(Self { w_img, w_txt })
    }

    pub fn embed_dim(&self) -> usize {
        self.w_img.rows()
    }

    pub fn img_dim(&self) -> usize {
        self.w_img.cols()
    }

    pub fn txt_dim(&self) -> usize {
        self.w_txt.cols()
    }
}

/// Xavier-uniform initialization from a seeded generator.
pub fn init_params(d: usize, d_img: usize, d_txt: usize, seed: u64) -> Result<DualEncoderParams> {
    if d < 2 || d_img < 1 || d_txt < 1 {
        return Err(Error::invalid(
            "dimensions",
            format!("need d >= 2, D_img >= 1, D_txt >= 1 (got {d}, {d_img}, {d_txt})"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xavier = |rows: usize, cols: usize| {
        let bound = xavier_bound(cols, rows);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Matrix::new(rows, cols, data)
    };
    let w_img = xavier(d, d_img)?;
    let w_txt = xavier(d, d_txt)?;
    DualEncoderParams::new(w_img, w_txt)
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Unnormalized projections plus their row norms, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Projected {
    pub unit: Matrix,
    pub norms: Vec<f64>,
}

fn project(w: &Matrix, raw: &Matrix, which: &'static str) -> Result<Projected> {
    if raw.cols() != w.cols() {
        return Err(Error::DimensionMismatch {
            op: which,
            detail: format!("inputs have {} features, head expects {}", raw.cols(), w.cols()),
        });
    }
    let mut unit = matmul_transposed(raw, w)?;
    let mut norms = Vec::with_capacity(unit.rows());
    for r in 0..unit.rows() {
        let row = unit.row_mut(r);
        let n = crate::linalg::norm(row);
        if !(n >= MIN_PROJECTED_NORM) || !n.is_finite() {
            return Err(Error::ZeroNormRow { row: r });
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok(Projected { unit, norms })
}

/// Forward pass keeping what [`backward`] needs.
pub fn embed_with_cache(
    params: &DualEncoderParams,
    raw_img: &Matrix,
    raw_txt: &Matrix,
) -> Result<(Projected, Projected)> {
    if raw_img.rows() != raw_txt.rows() {
        return Err(Error::DimensionMismatch {
            op: "embed",
            detail: format!("{} image rows vs {} text rows", raw_img.rows(), raw_txt.rows()),
        });
    }
    let img = project(&params.w_img, raw_img, "embed (image)")?;
    let txt = project(&params.w_txt, raw_txt, "embed (text)")?;
    Ok((img, txt))
}

/// Unit-norm embeddings `(N × d, N × d)`.
pub fn embed(
    params: &DualEncoderParams,
    raw_img: &Matrix,
    raw_txt: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let (img, txt) = embed_with_cache(params, raw_img, raw_txt)?;
    Ok((img.unit, txt.unit))
}

/// Embeds one modality only.
pub fn embed_images(params: &DualEncoderParams, raw_img: &Matrix) -> Result<Matrix> {
    Ok(project(&params.w_img, raw_img, "embed (image)")?.unit)
}

pub fn embed_texts(params: &DualEncoderParams, raw_txt: &Matrix) -> Result<Matrix> {
    Ok(project(&params.w_txt, raw_txt, "embed (text)")?.unit)
}

// dL/du = (I - e eᵀ) g / ‖u‖ per row, then dL/dW = (dL/dU)ᵀ X.
fn head_gradient(cache: &Projected, raw: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if upstream.shape() != cache.unit.shape() {
        return Err(Error::DimensionMismatch {
            op: "backward",
            detail: format!(
                "upstream gradient {:?} vs embeddings {:?}",
                upstream.shape(),
                cache.unit.shape()
            ),
        });
    }
    let mut du = upstream.clone();
    for r in 0..du.rows() {
        let e = cache.unit.row(r);
        let row = du.row_mut(r);
        let along = crate::linalg::dot(e, row);
        let inv = 1.0 / cache.norms[r];
        for (g, &ei) in row.iter_mut().zip(e) {
            *g = (*g - along * ei) * inv;
        }
    }
    crate::linalg::transpose_matmul(&du, raw)
}

/// Gradients of a scalar loss with respect to both heads, given the loss
/// gradient on the normalized embeddings.
pub fn backward(
    params: &DualEncoderParams,
    raw_img: &Matrix,
    raw_txt: &Matrix,
    d_emb_img: &Matrix,
    d_emb_txt: &Matrix,
) -> Result<EncoderGradients> {
    let (img, txt) = embed_with_cache(params, raw_img, raw_txt)?;
    backward_cached(&img, &txt, raw_img, raw_txt, d_emb_img, d_emb_txt)
}

pub fn backward_cached(
    img: &Projected,
    txt: &Projected,
    raw_img: &Matrix,
    raw_txt: &Matrix,
    d_emb_img: &Matrix,
    d_emb_txt: &Matrix,
) -> Result<EncoderGradients> {
    Ok(EncoderGradients {
        g_img: head_gradient(img, raw_img, d_emb_img)?,
        g_txt: head_gradient(txt, raw_txt, d_emb_txt)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(8, 5, 3, 42).unwrap();
        let b = init_params(8, 5, 3, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(8, 5, 3, 43).unwrap());
        let bound = xavier_bound(5, 8);
        assert!(a.w_img.as_slice().iter().all(|x| x.abs() <= bound));
        assert_eq!(xavier_bound(2048, 256), (6.0f64 / 2304.0).sqrt());
    }

    #[test]
    fn init_entry_mean_within_three_sigma() {
        // 256 x 400 = 102400 draws from U(-b, b): sd = b/√3
        let p = init_params(256, 400, 1, 7).unwrap();
        let xs = p.w_img.as_slice();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sigma = xavier_bound(400, 256) / 3f64.sqrt();
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn identity_projection_passes_unit_rows() {
        let params = DualEncoderParams::new(Matrix::identity(3), Matrix::identity(3)).unwrap();
        let x = crate::linalg::l2_normalize_rows(&random(4, 3, 1)).unwrap();
        let (ei, et) = embed(&params, &x, &x).unwrap();
        for (a, b) in ei.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(ei, et);
    }

    #[test]
    fn embed_is_scale_invariant() {
        let params = init_params(4, 6, 5, 3).unwrap();
        let xi = random(3, 6, 4);
        let xt = random(3, 5, 5);
        let (a, _) = embed(&params, &xi, &xt).unwrap();
        let mut scaled = xi.clone();
        scaled.row_mut(1).iter_mut().for_each(|v| *v *= 5.0);
        let (b, _) = embed(&params, &scaled, &xt).unwrap();
        for (x, y) in a.row(1).iter().zip(b.row(1)) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn embed_matches_row_oracle() {
        let params = init_params(4, 6, 5, 8).unwrap();
        let xi = random(5, 6, 9);
        let xt = random(5, 5, 10);
        let (ei, et) = embed(&params, &xi, &xt).unwrap();
        for r in 0..5 {
            let u: Vec<f64> = (0..4)
                .map(|k| (0..6).map(|c| params.w_img.get(k, c) * xi.get(r, c)).sum())
                .collect();
            let n = norm(&u);
            for (a, b) in ei.row(r).iter().zip(&u) {
                assert!((a - b / n).abs() < 1e-12);
            }
            assert!((norm(et.row(r)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_rejects_zero_projection() {
        let params = init_params(4, 3, 3, 1).unwrap();
        let mut xi = random(3, 3, 2);
        xi.row_mut(2).iter_mut().for_each(|v| *v = 0.0);
        let xt = random(3, 3, 3);
        assert!(matches!(
            embed(&params, &xi, &xt),
            Err(Error::ZeroNormRow { row: 2 })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let params = init_params(4, 5, 5, 1).unwrap();
        let xi = random(3, 5, 2);
        let xt = random(3, 5, 3);
        let z = Matrix::zeros(3, 4);
        let g = backward(&params, &xi, &xt, &z, &z).unwrap();
        assert!(g.g_img.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.g_txt.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn radial_upstream_is_projected_out() {
        let params = init_params(4, 5, 5, 1).unwrap();
        let xi = random(3, 5, 2);
        let xt = random(3, 5, 3);
        let (ei, et) = embed(&params, &xi, &xt).unwrap();
        let mut up_i = ei.clone();
        up_i.as_mut_slice().iter_mut().for_each(|v| *v *= 2.5);
        let g = backward(&params, &xi, &xt, &up_i, &et).unwrap();
        assert!(g.g_img.as_slice().iter().all(|v| v.abs() < 1e-14));
        assert!(g.g_txt.as_slice().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn backward_matches_central_differences() {
        // loss = Σ c_img ⊙ E_img + Σ c_txt ⊙ E_txt, linear in the embeddings
        let params = init_params(4, 5, 5, 11).unwrap();
        let xi = random(3, 5, 12);
        let xt = random(3, 5, 13);
        let ci = random(3, 4, 14);
        let ct = random(3, 4, 15);
        let loss = |p: &DualEncoderParams| {
            let (ei, et) = embed(p, &xi, &xt).unwrap();
            crate::linalg::dot(ei.as_slice(), ci.as_slice())
                + crate::linalg::dot(et.as_slice(), ct.as_slice())
        };
        let g = backward(&params, &xi, &xt, &ci, &ct).unwrap();
        let h = 1e-5;
        for which in 0..2 {
            let analytic = if which == 0 { &g.g_img } else { &g.g_txt };
            for k in 0..analytic.as_slice().len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                let (pm, mm) = if which == 0 {
                    (&mut plus.w_img, &mut minus.w_img)
                } else {
                    (&mut plus.w_txt, &mut minus.w_txt)
                };
                pm.as_mut_slice()[k] += h;
                mm.as_mut_slice()[k] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = analytic.as_slice()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-6, "coord {k}: analytic {a} numeric {numeric}");
            }
        }
    }
}
