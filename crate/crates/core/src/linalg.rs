//! Dense row-major matrices and the handful of reductions the trainer needs.
//!
//! Everything is `f64`. At the default temperature the logits are the cosine
//! scores scaled by 20, and single precision is not enough for the
//! finite-difference checks in the test suite.

use std::fmt;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::new",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("matrix entry ({}, {})", pos / cols.max(1), pos % cols.max(1)),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                op: "Matrix::from_rows",
                detail: format!("row {bad} has {} entries, expected {cols}", rows[bad].len()),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub(crate) fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_inner(op: &'static str, a: (usize, usize), b: (usize, usize), ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            op,
            detail: format!("{}x{} with {}x{}", a.0, a.1, b.0, b.1),
        })
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul", a.shape(), b.shape(), a.cols == b.rows)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("matmul_transposed", a.shape(), b.shape(), a.cols == b.cols)?;
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ai, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn transpose_matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inner("transpose_matmul", a.shape(), b.shape(), a.rows == b.rows)?;
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let bk = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            for (o, &bkj) in out.data[i * b.cols..(i + 1) * b.cols].iter_mut().zip(bk) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let n = norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNormRow { row: r });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(
            "temperature",
            format!("must be positive and finite, got {temperature}"),
        ))
    }
}

/// `log Σ exp(v/τ)`, stabilized by subtracting the maximum.
pub fn log_sum_exp(v: &[f64], temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    if v.is_empty() {
        return Err(Error::Empty("log_sum_exp input"));
    }
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / temperature));
    let sum: f64 = v.iter().map(|&x| (x / temperature - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Softmax of `v/τ` with max subtraction.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / temperature));
    let mut out: Vec<f64> = v.iter().map(|&x| (x / temperature - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// Mean and population (divide-by-n) variance.
pub fn mean_variance(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("mean_variance input"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var))
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Empty("entropy input"));
    }
    if let Some(i) = p.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::invalid(
            "p",
            format!("entry {i} is {} (must be a non-negative probability)", p[i]),
        ));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::invalid("p", format!("sums to {total}, expected 1")));
    }
    let h = -p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of the second matrix.
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = m.rows;
    if n != m.cols {
        return Err(Error::DimensionMismatch {
            op: "symmetric_eigen",
            detail: format!("{}x{} is not square", m.rows, m.cols),
        });
    }
    let mut a = m.data.clone();
    let mut v = Matrix::identity(n).data;

    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off <= scale * 1e-32 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors.data[k * n + dst] = v[k * n + src];
        }
    }
    Ok((values, vectors))
}

/// Result of projecting rows onto their top two principal components.
#[derive(Debug, Clone)]
pub struct Projection2d {
    /// `rows × 2` coordinates.
    pub coords: Matrix,
    /// Variance along each retained component (population convention).
    pub variances: [f64; 2],
    /// Set when the centered data has rank < 2; the second column is then zero.
    pub degenerate: bool,
}

/// Projects mean-centered rows onto the top-2 eigenvectors of their
/// covariance. Each component's sign is chosen so its largest-magnitude
/// loading is positive.
pub fn pca_project_2d(m: &Matrix) -> Result<Projection2d> {
    if m.rows < 2 || m.cols < 2 {
        return Err(Error::invalid(
            "m",
            format!("PCA needs at least 2x2 data, got {}x{}", m.rows, m.cols),
        ));
    }
    let n = m.rows as f64;
    let mut centered = m.clone();
    for c in 0..m.cols {
        let mean = (0..m.rows).map(|r| m.get(r, c)).sum::<f64>() / n;
        for r in 0..m.rows {
            centered.data[r * m.cols + c] -= mean;
        }
    }
    let mut cov = transpose_matmul(&centered, &centered)?;
    cov.data.iter_mut().for_each(|x| *x /= n);
    let (values, vectors) = symmetric_eigen(&cov)?;

    let top = values[0].max(0.0);
    let rank_tol = 1e-12 * top.max(f64::MIN_POSITIVE);
    let mut degenerate = false;
    let mut coords = Matrix::zeros(m.rows, 2);
    let mut variances = [0.0; 2];
    for comp in 0..2 {
        let lambda = values[comp];
        if lambda <= rank_tol || top == 0.0 {
            degenerate = true;
            continue;
        }
        let mut axis = vectors.column(comp);
        let lead = axis
            .iter()
            .copied()
            .fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
        for r in 0..m.rows {
            coords.data[r * 2 + comp] = dot(centered.row(r), &axis);
        }
        variances[comp] = lambda;
    }
    Ok(Projection2d {
        coords,
        variances,
        degenerate,
    })
}
