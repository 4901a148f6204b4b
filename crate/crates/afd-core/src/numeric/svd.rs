//! One-sided Jacobi SVD for small dense matrices, plus the truncated
//! interface used when seeding new adapter columns.

use crate::error::{Error, Result};
use crate::numeric::matrix::Matrix;

/// Full thin SVD of `m` (rows x cols): returns (U, sigma, V) with
/// m ~= U * diag(sigma) * V^T, sigma sorted non-increasing.
///
/// One-sided Jacobi on the wider side, fixed (i, j) sweep order so results
/// are deterministic. Columns with negligible norm produce zero U columns.
pub fn jacobi_svd(m: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    jacobi_svd_damped(m, 0.0)
}

/// Same as [`jacobi_svd`] but the left factor is formed through a damped
/// inverse: u_i = a_i * sigma_i / (sigma_i^2 + ridge). With ridge = 0 this is
/// plain normalization; any positive ridge regularizes near-zero singular
/// directions.
pub fn jacobi_svd_damped(m: &Matrix, ridge: f64) -> (Matrix, Vec<f64>, Matrix) {
    if m.rows() >= m.cols() {
        jacobi_tall(m, ridge)
    } else {
        // M = U S V^T  <=>  M^T = V S U^T
        let (v, sigma, u) = jacobi_tall(&m.transpose(), ridge);
        (u, sigma, v)
    }
}

fn jacobi_tall(m: &Matrix, ridge: f64) -> (Matrix, Vec<f64>, Matrix) {
    let rows = m.rows();
    let cols = m.cols();
    debug_assert!(rows >= cols);

    // Work on columns of A; V accumulates the applied rotations.
    let mut a = m.clone();
    let mut v = Matrix::identity(cols);

    let scale = m.frobenius_norm().max(1e-300);
    let tol = 1e-14;
    let max_sweeps = 60;

    for _ in 0..max_sweeps {
        let mut rotated = false;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for r in 0..rows {
                    let ai = a.at(r, i);
                    let aj = a.at(r, j);
                    alpha += ai * ai;
                    beta += aj * aj;
                    gamma += ai * aj;
                }
                if gamma.abs() <= tol * scale * scale {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let ai = a.at(r, i);
                    let aj = a.at(r, j);
                    a.set(r, i, c * ai - s * aj);
                    a.set(r, j, s * ai + c * aj);
                }
                for r in 0..cols {
                    let vi = v.at(r, i);
                    let vj = v.at(r, j);
                    v.set(r, i, c * vi - s * vj);
                    v.set(r, j, s * vi + c * vj);
                }
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }

    // Column norms are the singular values; sort by (-sigma, index).
    let mut order: Vec<(f64, usize)> = (0..cols)
        .map(|c| {
            let norm: f64 = (0..rows).map(|r| a.at(r, c) * a.at(r, c)).sum::<f64>().sqrt();
            (norm, c)
        })
        .collect();
    order.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));

    let mut u = Matrix::zeros(rows, cols);
    let mut v_sorted = Matrix::zeros(cols, cols);
    let mut sigma = Vec::with_capacity(cols);
    for (slot, &(s, c)) in order.iter().enumerate() {
        sigma.push(s);
        let denom = s * s + ridge;
        let inv = if denom > 0.0 { s / denom } else { 0.0 };
        for r in 0..rows {
            u.set(r, slot, a.at(r, c) * inv);
        }
        for r in 0..cols {
            v_sorted.set(r, slot, v.at(r, c));
        }
    }
    (u, sigma, v_sorted)
}

/// Rank-k truncation: returns (U_k: rows x k, sigma_k: k, V_k: cols x k).
pub fn truncated_svd(m: &Matrix, k: usize, ridge: f64) -> Result<(Matrix, Vec<f64>, Matrix)> {
    if k == 0 {
        return Err(Error::InvalidArgument("truncation rank k must be >= 1".into()));
    }
    let max_k = m.rows().min(m.cols());
    if k > max_k {
        return Err(Error::InvalidArgument(format!(
            "truncation rank {k} exceeds min(rows, cols) = {max_k}"
        )));
    }
    if ridge < 0.0 {
        return Err(Error::InvalidArgument("ridge must be non-negative".into()));
    }
    let (u, sigma, v) = jacobi_svd_damped(m, ridge);
    let mut uk = Matrix::zeros(m.rows(), k);
    let mut vk = Matrix::zeros(m.cols(), k);
    for c in 0..k {
        for r in 0..m.rows() {
            uk.set(r, c, u.at(r, c));
        }
        for r in 0..m.cols() {
            vk.set(r, c, v.at(r, c));
        }
    }
    Ok((uk, sigma[..k].to_vec(), vk))
}

/// Frobenius error of the rank-k reconstruction U_k diag(sigma_k) V_k^T.
pub fn reconstruction_error(m: &Matrix, u: &Matrix, sigma: &[f64], v: &Matrix) -> f64 {
    let k = sigma.len();
    let mut recon = Matrix::zeros(m.rows(), m.cols());
    for (t, &s) in sigma.iter().enumerate().take(k) {
        for r in 0..m.rows() {
            let us = u.at(r, t) * s;
            if us == 0.0 {
                continue;
            }
            for c in 0..m.cols() {
                recon.set(r, c, recon.at(r, c) + us * v.at(c, t));
            }
        }
    }
    m.sub(&recon).frobenius_norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force symmetric Jacobi eigendecomposition of M^T M; the
    /// singular-value oracle, independent of the one-sided path.
    fn singular_values_via_gram(m: &Matrix) -> Vec<f64> {
        let n = m.cols();
        let mut g = m.matmul_ta(m);
        for _ in 0..200 {
            let mut off = 0.0;
            let mut p = 0;
            let mut q = 1;
            for i in 0..n {
                for j in (i + 1)..n {
                    if g.at(i, j).abs() > off {
                        off = g.at(i, j).abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if off < 1e-14 {
                break;
            }
            let theta = 0.5 * (2.0 * g.at(p, q)).atan2(g.at(q, q) - g.at(p, p));
            let (c, s) = (theta.cos(), theta.sin());
            let mut rot = Matrix::identity(n);
            rot.set(p, p, c);
            rot.set(q, q, c);
            rot.set(p, q, s);
            rot.set(q, p, -s);
            g = rot.transpose().matmul(&g).matmul(&rot);
        }
        let mut eig: Vec<f64> = (0..n).map(|i| g.at(i, i).max(0.0).sqrt()).collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        eig
    }

    #[test]
    fn diagonal_case() {
        let m = Matrix::from_rows(&[
            vec![3.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let (u, sigma, v) = truncated_svd(&m, 2, 0.0).unwrap();
        assert!((sigma[0] - 3.0).abs() < 1e-12);
        assert!((sigma[1] - 2.0).abs() < 1e-12);
        let err = reconstruction_error(&m, &u, &sigma, &v);
        assert!((err - 1.0).abs() < 1e-9, "error {err}");
    }

    #[test]
    fn rank_one_is_exact() {
        let a = [1.0, -2.0, 0.5, 3.0];
        let b = [2.0, 0.0, -1.0];
        let rows: Vec<Vec<f64>> = a.iter().map(|&x| b.iter().map(|&y| x * y).collect()).collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let (u, sigma, v) = truncated_svd(&m, 1, 0.0).unwrap();
        let err = reconstruction_error(&m, &u, &sigma, &v);
        assert!(err < 1e-9, "error {err}");
    }

    #[test]
    fn truncation_error_matches_tail_singular_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Matrix::new(8, 6, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let full = singular_values_via_gram(&m);
        let (u, sigma, v) = truncated_svd(&m, 3, 0.0).unwrap();
        let err = reconstruction_error(&m, &u, &sigma, &v);
        let tail = (full[3] * full[3] + full[4] * full[4] + full[5] * full[5]).sqrt();
        assert!((err - tail).abs() < 1e-6, "{err} vs {tail}");
    }

    #[test]
    fn singular_values_match_gram_oracle_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let rows = rng.gen_range(2..=8);
            let cols = rng.gen_range(2..=8);
            let m = Matrix::new(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let (_, sigma, _) = jacobi_svd(&m);
            let oracle = singular_values_via_gram(&m);
            for (i, (a, b)) in sigma.iter().zip(oracle.iter()).enumerate() {
                assert!((a - b).abs() < 1e-6, "trial {trial} sv {i}: {a} vs {b}");
            }
            // non-increasing order
            for w in sigma.windows(2) {
                assert!(w[0] >= w[1] - 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_rank() {
        let m = Matrix::zeros(3, 3);
        assert!(truncated_svd(&m, 0, 0.0).is_err());
        assert!(truncated_svd(&m, 4, 0.0).is_err());
    }

    #[test]
    fn wide_matrices_work() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Matrix::new(3, 7, (0..21).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (u, sigma, v) = truncated_svd(&m, 3, 0.0).unwrap();
        let err = reconstruction_error(&m, &u, &sigma, &v);
        assert!(err < 1e-9, "thin reconstruction should be exact, got {err}");
    }
}
