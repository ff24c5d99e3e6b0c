use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use alignsched::eval::{export_embeddings, recall_from_scores, Direction, DEFAULT_KS};
use alignsched::linalg::{l2_normalize_rows, pca_project_2d};
use alignsched::Matrix;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Top-2 eigenvalues of the population covariance, via nalgebra.
fn top_two_covariance_eigenvalues(m: &Matrix) -> [f64; 2] {
    let (n, d) = m.shape();
    let x = DMatrix::from_row_slice(n, d, m.as_slice());
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |r, c| x[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / n as f64;
    let mut ev: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    [ev[0], ev[1]]
}

fn column_variance(coords: &Matrix, c: usize) -> f64 {
    let col = coords.column(c);
    let mean = col.iter().sum::<f64>() / col.len() as f64;
    col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64
}

#[test]
fn pca_variances_match_eigen_oracle() {
    for seed in 0..10 {
        let m = random(20, 8, seed);
        let p = pca_project_2d(&m).unwrap();
        let oracle = top_two_covariance_eigenvalues(&m);
        for c in 0..2 {
            assert!((column_variance(&p.coords, c) - oracle[c]).abs() < 1e-8);
            assert!((p.variances[c] - oracle[c]).abs() < 1e-8);
        }
        assert!(!p.degenerate);
    }
}

#[test]
fn exported_projection_matches_eigen_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let img = l2_normalize_rows(&random(12, 6, 1)).unwrap();
    let txt = l2_normalize_rows(&random(12, 6, 2)).unwrap();
    let ids: Vec<String> = (0..12).map(|k| format!("p{k}")).collect();
    let out = export_embeddings(&img, &txt, &ids, &dir.path().join("emb.csv")).unwrap();

    let text = std::fs::read_to_string(&out.projection).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(2).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 24);
    let coords = Matrix::from_rows(&rows).unwrap();

    let mut stacked = img.as_slice().to_vec();
    stacked.extend_from_slice(txt.as_slice());
    let oracle = top_two_covariance_eigenvalues(&Matrix::new(24, 6, stacked).unwrap());
    for c in 0..2 {
        assert!((column_variance(&coords, c) - oracle[c]).abs() < 1e-8);
    }
}

fn scores(q: usize, seed: u64, coarse: bool) -> Matrix {
    let m = random(q, q, seed);
    if !coarse {
        return m;
    }
    Matrix::new(q, q, m.as_slice().iter().map(|v| (v * 4.0).round() / 4.0 + 0.0).collect()).unwrap()
}

proptest! {
    #[test]
    fn recall_non_decreasing_in_k(seed in 0u64..10_000, coarse in any::<bool>()) {
        let s = scores(10, seed, coarse);
        let rep = recall_from_scores(&s, &[1, 2, 3, 5, 8, 10]).unwrap();
        for dir in [Direction::I2T, Direction::T2I] {
            let vals: Vec<f64> = [1, 2, 3, 5, 8, 10].iter().map(|&k| rep.get(dir, k).unwrap()).collect();
            prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(vals.iter().all(|v| (0.0..=100.0).contains(v)));
            prop_assert_eq!(vals[5], 100.0);
        }
    }

    #[test]
    fn recall_invariant_under_monotone_transform(seed in 0u64..10_000, coarse in any::<bool>()) {
        let s = scores(10, seed, coarse);
        let t = Matrix::new(10, 10, s.as_slice().iter().map(|v| (3.0 * v).exp() + 2.0).collect()).unwrap();
        prop_assert_eq!(
            recall_from_scores(&s, &DEFAULT_KS).unwrap(),
            recall_from_scores(&t, &DEFAULT_KS).unwrap()
        );
    }

    #[test]
    fn recall_invariant_under_pair_permutation(seed in 0u64..10_000, perm_seed in 0u64..1000) {
        // continuous scores: no ties, so the index tie-break cannot matter
        let s = scores(10, seed, false);
        let mut perm: Vec<usize> = (0..10).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(perm_seed));
        let mut data = Vec::with_capacity(100);
        for &i in &perm {
            for &j in &perm {
                data.push(s.get(i, j));
            }
        }
        let p = Matrix::new(10, 10, data).unwrap();
        prop_assert_eq!(
            recall_from_scores(&s, &DEFAULT_KS).unwrap(),
            recall_from_scores(&p, &DEFAULT_KS).unwrap()
        );
    }
}
