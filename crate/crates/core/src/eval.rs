//! Bidirectional Recall@K and embedding export.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::fmt_real;
use crate::error::{Error, Result};
use crate::linalg::{matmul_transposed, pca_project_2d, Matrix, Projection2d};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// Image query, caption candidates.
    I2T,
    /// Caption query, image candidates.
    T2I,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::I2T => "i2t",
            Direction::T2I => "t2i",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Recall percentages per direction and cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub i2t: BTreeMap<usize, f64>,
    pub t2i: BTreeMap<usize, f64>,
    pub query_count: usize,
}

impl RetrievalReport {
    pub fn get(&self, dir: Direction, k: usize) -> Option<f64> {
        match dir {
            Direction::I2T => self.i2t.get(&k).copied(),
            Direction::T2I => self.t2i.get(&k).copied(),
        }
    }

    /// Validation criterion: R@1 (I2T) + R@1 (T2I).
    pub fn r1_sum(&self) -> f64 {
        self.get(Direction::I2T, 1).unwrap_or(0.0) + self.get(Direction::T2I, 1).unwrap_or(0.0)
    }

    /// `(direction, k, percentage)` in a fixed order.
    pub fn entries(&self) -> Vec<(Direction, usize, f64)> {
        let mut out = Vec::new();
        for (dir, map) in [(Direction::I2T, &self.i2t), (Direction::T2I, &self.t2i)] {
            out.extend(map.iter().map(|(&k, &v)| (dir, k, v)));
        }
        out
    }
}

/// 1-based rank of the correct candidate `i` among `scores`, counting
/// strictly higher scores plus equal scores at lower indices.
fn rank_of(scores: impl Iterator<Item = f64>, i: usize, own: f64) -> usize {
    let mut rank = 1;
    for (j, s) in scores.enumerate() {
        if s > own || (s == own && j < i) {
            rank += 1;
        }
    }
    rank
}

/// Recall@K from a `Q × Q` score matrix whose diagonal holds the true pairs.
pub fn recall_from_scores(scores: &Matrix, ks: &[usize]) -> Result<RetrievalReport> {
    let q = scores.rows();
    if q == 0 {
        return Err(Error::Empty("retrieval pool"));
    }
    if scores.cols() != q {
        return Err(Error::DimensionMismatch {
            op: "recall_at_k",
            detail: format!("score matrix is {}x{}", scores.rows(), scores.cols()),
        });
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > q) {
        return Err(Error::invalid("k", format!("K={k} is outside 1..={q}")));
    }
    let mut i2t_ranks = Vec::with_capacity(q);
    let mut t2i_ranks = Vec::with_capacity(q);
    for i in 0..q {
        let own = scores.get(i, i);
        i2t_ranks.push(rank_of(scores.row(i).iter().copied(), i, own));
        t2i_ranks.push(rank_of((0..q).map(|r| scores.get(r, i)), i, own));
    }
    let pct = |ranks: &[usize], k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / q as f64;
    Ok(RetrievalReport {
        i2t: ks.iter().map(|&k| (k, pct(&i2t_ranks, k))).collect(),
        t2i: ks.iter().map(|&k| (k, pct(&t2i_ranks, k))).collect(),
        query_count: q,
    })
}

/// Recall@K over the full pool of normalized embeddings.
pub fn recall_at_k(emb_img: &Matrix, emb_txt: &Matrix, ks: &[usize]) -> Result<RetrievalReport> {
    if emb_img.rows() != emb_txt.rows() {
        return Err(Error::DimensionMismatch {
            op: "recall_at_k",
            detail: format!("{} images vs {} captions", emb_img.rows(), emb_txt.rows()),
        });
    }
    if emb_img.rows() == 0 {
        return Err(Error::Empty("retrieval pool"));
    }
    recall_from_scores(&matmul_transposed(emb_img, emb_txt)?, ks)
}

/// Percentage drop from `clean` to `noisy` on one metric.
pub fn relative_drop(clean: &RetrievalReport, noisy: &RetrievalReport, dir: Direction, k: usize) -> Result<f64> {
    let missing = || Error::invalid("metric", format!("R@{k} {dir} missing from report"));
    let c = clean.get(dir, k).ok_or_else(missing)?;
    let n = noisy.get(dir, k).ok_or_else(missing)?;
    relative_drop_value(c, n)
}

pub fn relative_drop_value(clean: f64, noisy: f64) -> Result<f64> {
    if clean == 0.0 {
        return Err(Error::invalid("clean", "relative drop undefined for a zero clean value"));
    }
    Ok(100.0 * (clean - noisy) / clean)
}

/// Paths written by [`export_embeddings`].
#[derive(Debug, Clone)]
pub struct ExportedEmbeddings {
    pub embeddings: PathBuf,
    pub projection: PathBuf,
    pub pca: Projection2d,
}

/// Companion path for the 2D projection: `<stem>_2d.csv`.
pub fn projection_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("embeddings");
    path.with_file_name(format!("{stem}_2d.csv"))
}

/// Writes `id,modality,e0..` for every image then every caption, plus a
/// `id,modality,x,y` file with the PCA projection of the stacked rows.
pub fn export_embeddings(emb_img: &Matrix, emb_txt: &Matrix, ids: &[String], path: &Path) -> Result<ExportedEmbeddings> {
    if emb_img.shape() != emb_txt.shape() || emb_img.rows() != ids.len() {
        return Err(Error::DimensionMismatch {
            op: "export_embeddings",
            detail: format!(
                "images {:?}, captions {:?}, {} ids",
                emb_img.shape(),
                emb_txt.shape(),
                ids.len()
            ),
        });
    }
    let d = emb_img.cols();
    let mut stacked = emb_img.as_slice().to_vec();
    stacked.extend_from_slice(emb_txt.as_slice());
    let stacked = Matrix::new(2 * ids.len(), d, stacked)?;
    let pca = pca_project_2d(&stacked)?;

    let labels = || {
        ids.iter()
            .map(|id| (id, "image"))
            .chain(ids.iter().map(|id| (id, "text")))
    };

    let write_csv = |path: &Path, header: &str, rows: &Matrix| -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut body = || -> std::io::Result<()> {
            writeln!(out, "{header}")?;
            for (r, (id, modality)) in labels().enumerate() {
                write!(out, "{id},{modality}")?;
                for v in rows.row(r) {
                    write!(out, ",{}", fmt_real(*v))?;
                }
                writeln!(out)?;
            }
            out.flush()
        };
        body().map_err(|e| Error::io(path, e))
    };

    let coords_header: Vec<String> = (0..d).map(|k| format!("e{k}")).collect();
    write_csv(path, &format!("id,modality,{}", coords_header.join(",")), &stacked)?;
    let projection = projection_path(path);
    write_csv(&projection, "id,modality,x,y", &pca.coords)?;
    Ok(ExportedEmbeddings {
        embeddings: path.to_path_buf(),
        projection,
        pca,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn report(i2t: &[(usize, f64)]) -> RetrievalReport {
        RetrievalReport {
            i2t: i2t.iter().copied().collect(),
            t2i: BTreeMap::new(),
            query_count: 100,
        }
    }

    #[test]
    fn perfect_and_reversed_alignment() {
        let mut s = Matrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                s.set(i, j, if i == j { 1.0 } else { 0.1 * (i + j) as f64 / 12.0 });
            }
        }
        let r = recall_from_scores(&s, &[1]).unwrap();
        assert_eq!(r.get(Direction::I2T, 1), Some(100.0));
        assert_eq!(r.get(Direction::T2I, 1), Some(100.0));

        let mut rev = Matrix::new(6, 6, vec![0.5; 36]).unwrap();
        for i in 0..6 {
            rev.set(i, i, -1.0);
        }
        let r = recall_from_scores(&rev, &[1, 5]).unwrap();
        assert_eq!(r.get(Direction::I2T, 1), Some(0.0));
        assert_eq!(r.get(Direction::T2I, 5), Some(0.0));
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let s = Matrix::new(3, 3, vec![1.0; 9]).unwrap();
        let r = recall_from_scores(&s, &[1, 2, 3]).unwrap();
        // ranks are 1, 2, 3 for queries 0, 1, 2
        assert!((r.get(Direction::I2T, 1).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert!((r.get(Direction::I2T, 2).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.get(Direction::T2I, 3), Some(100.0));
    }

    #[test]
    fn rejects_bad_pools() {
        assert!(recall_from_scores(&Matrix::zeros(0, 0), &[1]).is_err());
        assert!(recall_from_scores(&Matrix::identity(4), &[5]).is_err());
        assert!(recall_from_scores(&Matrix::identity(4), &[0]).is_err());
    }

    #[test]
    fn embeddings_route_matches_scores_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = || {
            let raw = Matrix::new(12, 5, (0..60).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            crate::linalg::l2_normalize_rows(&raw).unwrap()
        };
        let (a, b) = (m(), m());
        let via_emb = recall_at_k(&a, &b, &DEFAULT_KS).unwrap();
        let via_scores = recall_from_scores(&matmul_transposed(&a, &b).unwrap(), &DEFAULT_KS).unwrap();
        assert_eq!(via_emb, via_scores);
    }

    #[test]
    fn drop_arithmetic() {
        let clean = report(&[(5, 45.0)]);
        let noisy = report(&[(5, 36.0)]);
        assert!((relative_drop(&clean, &noisy, Direction::I2T, 5).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(relative_drop(&clean, &clean, Direction::I2T, 5).unwrap(), 0.0);
        assert!((relative_drop_value(47.5, 42.75).unwrap() - 10.0).abs() < 1e-12);
        assert!(relative_drop_value(0.0, 1.0).is_err());
        assert!(relative_drop(&clean, &noisy, Direction::I2T, 1).is_err());
    }

    #[test]
    fn export_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = || {
            let raw = Matrix::new(7, 4, (0..28).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            crate::linalg::l2_normalize_rows(&raw).unwrap()
        };
        let (a, b) = (m(), m());
        let ids: Vec<String> = (0..7).map(|k| format!("q{k}")).collect();
        let path = dir.path().join("emb.csv");
        let out = export_embeddings(&a, &b, &ids, &path).unwrap();
        let first = fs::read_to_string(&out.embeddings).unwrap();
        let proj = fs::read_to_string(&out.projection).unwrap();
        assert_eq!(first.lines().count(), 1 + 14);
        assert_eq!(proj.lines().count(), 1 + 14);
        assert!(first.lines().nth(1).unwrap().starts_with("q0,image,"));
        assert!(first.lines().nth(8).unwrap().starts_with("q0,text,"));

        export_embeddings(&a, &b, &ids, &path).unwrap();
        assert_eq!(fs::read_to_string(&out.embeddings).unwrap(), first);
        assert_eq!(fs::read_to_string(&out.projection).unwrap(), proj);
    }
}
