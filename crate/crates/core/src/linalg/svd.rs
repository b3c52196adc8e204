//! One-sided (Hestenes) Jacobi SVD for small square matrices, and the
//! Moore–Penrose pseudoinverse built on it.

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Sweep budget before reporting non-convergence.
pub const MAX_SWEEPS: usize = 30;

/// Default relative threshold below which singular values are dropped
/// by [`pseudoinverse`].
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// `a = u · diag(sigma) · vᵀ` with `sigma` sorted non-increasing.
///
/// Each column of `u` has its largest-magnitude entry non-negative
/// (the paired column of `v` is flipped along with it).
#[derive(Debug, Clone, PartialEq)]
pub struct Svd<T> {
    pub u: Matrix<T>,
    pub sigma: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> Svd<T> {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Result<Matrix<T>> {
        self.u.scale_columns(&self.sigma)?.matmul_t(&self.v)
    }
}

fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).map(|(&a, &b)| a * b).sum()
}

fn norm<T: Scalar>(x: &[T]) -> T {
    let max = x
        .iter()
        .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc });
    if max == T::zero() {
        return T::zero();
    }
    max * x.iter().map(|&v| (v / max) * (v / max)).sum::<T>().sqrt()
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    for (xp, xq) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let a = *xp;
        let b = *xq;
        *xp = c * a - s * b;
        *xq = s * a + c * b;
    }
}

/// Orthonormal completion: replaces the columns flagged in `null` with unit
/// vectors orthogonal to every other column, drawn from the standard basis.
fn complete_basis<T: Scalar>(cols: &mut [Vec<T>], null: &[bool]) {
    let n = cols.len();
    for j in 0..n {
        if !null[j] {
            continue;
        }
        let mut best: Option<(T, Vec<T>)> = None;
        for k in 0..n {
            let mut e = vec![T::zero(); n];
            e[k] = T::one();
            // Two Gram–Schmidt passes against every settled column.
            for _ in 0..2 {
                for (i, other) in cols.iter().enumerate() {
                    if i == j || (null[i] && i > j) {
                        continue;
                    }
                    let proj = dot(&e, other);
                    for (x, &o) in e.iter_mut().zip(other) {
                        *x -= proj * o;
                    }
                }
            }
            let len = norm(&e);
            if best.as_ref().is_none_or(|(b, _)| len > *b) {
                best = Some((len, e));
            }
        }
        let (len, mut e) = best.expect("n > 0");
        for x in &mut e {
            *x /= len;
        }
        cols[j] = e;
    }
}

/// Singular value decomposition of a square matrix by one-sided Jacobi.
///
/// Converges when every column pair satisfies
/// `|cpᵀcq| ≤ tol·‖cp‖‖cq‖` with `tol` from [`Scalar::jacobi_tolerance`].
pub fn svd_square<T: Scalar>(a: &Matrix<T>) -> Result<Svd<T>> {
    if !a.is_square() {
        return Err(shape_err!("svd_square needs a square matrix, got {}x{}", a.rows(), a.cols()));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(Svd {
            u: Matrix::zeros(0, 0),
            sigma: Vec::new(),
            v: Matrix::zeros(0, 0),
        });
    }

    // Column-major working copies.
    let mut work: Vec<Vec<T>> = (0..n).map(|j| (0..n).map(|i| a[(i, j)]).collect()).collect();
    let mut vcols: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();

    let tol = T::jacobi_tolerance();
    // Columns at round-off level relative to the whole matrix cannot be
    // orthogonalised further and are left alone.
    let noise = a.frobenius_norm() * T::epsilon() * T::from_usize(n).unwrap_or_else(T::one);
    let mut converged = false;
    let mut residual = T::zero();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = T::zero();
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let np = norm(&work[p]);
                let nq = norm(&work[q]);
                if np <= noise || nq <= noise {
                    continue;
                }
                let denom = np * nq;
                let gamma = dot(&work[p], &work[q]);
                let off = gamma.abs() / denom;
                if off > residual {
                    residual = off;
                }
                if off <= tol {
                    continue;
                }
                rotated = true;
                let alpha = np * np;
                let beta = nq * nq;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let sign = if zeta >= T::zero() { T::one() } else { -T::one() };
                let t = sign / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            sweeps: MAX_SWEEPS,
            residual: residual.to_f64_lossy(),
        });
    }

    let raw_sigma: Vec<T> = work.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        raw_sigma[j]
            .partial_cmp(&raw_sigma[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sigma: Vec<T> = order.iter().map(|&i| raw_sigma[i]).collect();
    let mut ucols: Vec<Vec<T>> = order.iter().map(|&i| work[i].clone()).collect();
    let mut vcols: Vec<Vec<T>> = order.iter().map(|&i| vcols[i].clone()).collect();

    let null_floor = sigma[0] * T::epsilon() * T::from_usize(n).unwrap_or_else(T::one);
    let null: Vec<bool> = sigma
        .iter()
        .map(|&s| s == T::zero() || s <= null_floor)
        .collect();
    for (col, (&s, &is_null)) in ucols.iter_mut().zip(sigma.iter().zip(&null)) {
        if !is_null {
            for x in col.iter_mut() {
                *x /= s;
            }
        }
    }
    if null.iter().any(|&b| b) {
        complete_basis(&mut ucols, &null);
    }

    for (uc, vc) in ucols.iter_mut().zip(vcols.iter_mut()) {
        let mut idx = 0;
        for (i, &x) in uc.iter().enumerate() {
            if x.abs() > uc[idx].abs() {
                idx = i;
            }
        }
        if uc[idx] < T::zero() {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let u = Matrix::from_fn(n, n, |i, j| ucols[j][i]);
    let v = Matrix::from_fn(n, n, |i, j| vcols[j][i]);
    Ok(Svd { u, sigma, v })
}

/// Moore–Penrose pseudoinverse `V·Λ⁺·Uᵀ` of a square matrix.
///
/// Singular values `≤ rank_tol · σ_max` are treated as zero.
pub fn pseudoinverse<T: Scalar>(a: &Matrix<T>, rank_tol: T) -> Result<Matrix<T>> {
    if rank_tol < T::zero() || !rank_tol.is_finite() {
        return Err(Error::Config(format!("rank_tol must be finite and >= 0, got {rank_tol}")));
    }
    let svd = svd_square(a)?;
    pseudoinverse_from_svd(&svd, rank_tol)
}

pub fn pseudoinverse_from_svd<T: Scalar>(svd: &Svd<T>, rank_tol: T) -> Result<Matrix<T>> {
    let n = svd.rank();
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let cutoff = rank_tol * svd.sigma[0];
    let inv: Vec<T> = svd
        .sigma
        .iter()
        .map(|&s| {
            if s > cutoff && s > T::zero() {
                T::one() / s
            } else {
                T::zero()
            }
        })
        .collect();
    svd.v.scale_columns(&inv)?.matmul_t(&svd.u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_matrix(n: usize, seed: u64) -> Matrix<f64> {
        let mut state = seed ^ 0x9E3779B97F4A7C15;
        Matrix::from_fn(n, n, |_, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
    }

    /// Gauss–Jordan elimination with partial pivoting.
    fn gauss_inverse(a: &Matrix<f64>) -> Matrix<f64> {
        let n = a.rows();
        let mut aug = vec![vec![0.0; 2 * n]; n];
        for i in 0..n {
            for j in 0..n {
                aug[i][j] = a[(i, j)];
            }
            aug[i][n + i] = 1.0;
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| aug[x][col].abs().partial_cmp(&aug[y][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, piv);
            let d = aug[col][col];
            for x in aug[col].iter_mut() {
                *x /= d;
            }
            for row in 0..n {
                if row != col {
                    let f = aug[row][col];
                    let pivot_row = aug[col].clone();
                    for (x, p) in aug[row].iter_mut().zip(pivot_row) {
                        *x -= f * p;
                    }
                }
            }
        }
        Matrix::from_fn(n, n, |i, j| aug[i][n + j])
    }

    fn orthonormality_error(q: &Matrix<f64>) -> f64 {
        q.t_matmul(q)
            .unwrap()
            .sub(&Matrix::identity(q.cols()))
            .unwrap()
            .frobenius_norm()
    }

    #[test]
    fn diagonal_input() {
        let a = Matrix::<f64>::from_diag(&[3.0, 1.0]);
        let svd = svd_square(&a).unwrap();
        assert_eq!(svd.sigma, vec![3.0, 1.0]);
        assert_eq!(svd.u, Matrix::identity(2));
        assert_eq!(svd.v, Matrix::identity(2));
    }

    #[test]
    fn unsorted_diagonal_is_sorted() {
        let a = Matrix::<f64>::from_diag(&[1.0, -5.0, 2.0]);
        let svd = svd_square(&a).unwrap();
        assert_eq!(svd.sigma, vec![5.0, 2.0, 1.0]);
        assert!(svd.reconstruct().unwrap().sub(&a).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn zero_matrix() {
        let svd = svd_square(&Matrix::<f64>::zeros(2, 2)).unwrap();
        assert_eq!(svd.sigma, vec![0.0, 0.0]);
        assert!(orthonormality_error(&svd.u) < 1e-15);
        assert!(orthonormality_error(&svd.v) < 1e-15);
    }

    #[test]
    fn rank_deficient_basis_completion() {
        let a = Matrix::<f64>::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[1.0, 0.0, 1.0]])
            .unwrap();
        let svd = svd_square(&a).unwrap();
        assert!(svd.sigma[2] < 1e-14);
        assert!(orthonormality_error(&svd.u) < 1e-12);
        assert!(orthonormality_error(&svd.v) < 1e-12);
        assert!(svd.reconstruct().unwrap().sub(&a).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn random_reconstruction() {
        for n in [1, 2, 5, 8, 16, 32] {
            let a = rand_matrix(n, n as u64);
            let svd = svd_square(&a).unwrap();
            let err = svd.reconstruct().unwrap().sub(&a).unwrap().frobenius_norm();
            assert!(err < 1e-10, "n={n} err={err}");
            assert!(orthonormality_error(&svd.u) < 1e-10);
            assert!(orthonormality_error(&svd.v) < 1e-10);
            assert!(svd.sigma.windows(2).all(|w| w[0] >= w[1]));
            assert!(svd.sigma.iter().all(|&s| s >= 0.0));
        }
    }

    #[test]
    fn sign_convention() {
        let svd = svd_square(&rand_matrix(6, 11)).unwrap();
        for j in 0..6 {
            let col: Vec<f64> = (0..6).map(|i| svd.u[(i, j)]).collect();
            let max = col.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(max >= 0.0);
        }
    }

    #[test]
    fn single_precision() {
        let a: Matrix<f32> = rand_matrix(8, 4).cast();
        let svd = svd_square(&a).unwrap();
        let err = svd.reconstruct().unwrap().sub(&a).unwrap().frobenius_norm();
        assert!(err < 1e-5, "err={err}");
    }

    #[test]
    fn non_square_rejected() {
        assert!(matches!(svd_square(&Matrix::<f64>::zeros(2, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn pinv_identity_and_diagonal() {
        assert_eq!(pseudoinverse(&Matrix::<f64>::identity(4), 1e-10).unwrap(), Matrix::identity(4));
        let p = pseudoinverse(&Matrix::<f64>::from_diag(&[2.0, 0.0]), 1e-12).unwrap();
        assert_eq!(p, Matrix::from_diag(&[0.5, 0.0]));
    }

    #[test]
    fn pinv_matches_gauss_inverse() {
        let a = rand_matrix(6, 99);
        let want = gauss_inverse(&a);
        let got = pseudoinverse(&a, DEFAULT_RANK_TOL).unwrap();
        let err = got.sub(&want).unwrap().max_abs();
        assert!(err < 1e-9, "err={err}");
    }

    #[test]
    fn pinv_rejects_negative_tol() {
        assert!(pseudoinverse(&Matrix::<f64>::identity(2), -1.0).is_err());
    }

    #[test]
    fn deterministic_bits() {
        let a = rand_matrix(12, 5);
        let s1 = svd_square(&a).unwrap();
        let s2 = svd_square(&a).unwrap();
        assert_eq!(s1, s2);
    }
}
