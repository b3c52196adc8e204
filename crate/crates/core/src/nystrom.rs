//! Generalized Nyström approximation of a rectangular matrix.
//!
//! `W` is split around an `r×r` sample block,
//!
//! ```text
//! W = [ A_W  B_W ]
//!     [ F_W  C_W ]
//! ```
//!
//! and reconstructed from the sampled strips only:
//! `Ŵ = [A_W; F_W] · A_W⁺ · [A_W  B_W]`, which keeps the three sampled
//! blocks and replaces `C_W` by `F_W·A_W⁺·B_W`.
//!
//! The same matrix is reachable through the singular vectors of `A_W`
//! extended out of sample, `Û = [U; F_W·V·Λ⁻¹]`, `V̂ = [V; B_Wᵀ·U·Λ⁻¹]`, with
//! `Ŵ = Û·Λ·V̂ᵀ`. Both routes are exposed so one can check the other.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{pseudoinverse, random, svd_square, Matrix};
use crate::scalar::Scalar;

/// Default relative floor on the singular values of the sample block.
pub const DEFAULT_SV_FLOOR: f64 = 1e-12;

/// How the sample rows and columns are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// The leading `r` rows and columns.
    #[default]
    Leading,
    /// A seeded permutation of rows and of columns is applied first.
    Random { seed: u64 },
}

/// The middle factor of the three-factor product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Core<T> {
    Pseudoinverse { rank_tol: T },
    /// Uses `A_W` itself in place of its pseudoinverse.
    RawSample,
}

/// Four-block partition of a matrix around its sample block.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixBlocks<T> {
    pub a_w: Matrix<T>,
    pub b_w: Matrix<T>,
    pub f_w: Matrix<T>,
    pub c_w: Matrix<T>,
    pub r: usize,
    pub m: usize,
    pub n: usize,
    /// `row_perm[i]` is the original row placed at position `i`.
    pub row_perm: Option<Vec<usize>>,
    pub col_perm: Option<Vec<usize>>,
}

fn check_rank(m: usize, n: usize, r: usize) -> Result<()> {
    if r == 0 || r >= m.min(n) {
        return Err(shape_err!("rank {r} must satisfy 0 < r < min({m}, {n})"));
    }
    Ok(())
}

/// Writes `src` (in permuted coordinates) back to original coordinates.
fn scatter<T: Scalar>(
    src: Matrix<T>,
    row_perm: Option<&[usize]>,
    col_perm: Option<&[usize]>,
) -> Matrix<T> {
    if row_perm.is_none() && col_perm.is_none() {
        return src;
    }
    let (m, n) = src.shape();
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let oi = row_perm.map_or(i, |p| p[i]);
        for j in 0..n {
            let oj = col_perm.map_or(j, |p| p[j]);
            out[(oi, oj)] = src[(i, j)];
        }
    }
    out
}

impl<T: Scalar> MatrixBlocks<T> {
    /// Splits `w` around an `r×r` sample block.
    pub fn partition(w: &Matrix<T>, r: usize, sampling: Sampling) -> Result<Self> {
        let (m, n) = w.shape();
        check_rank(m, n, r)?;
        let (row_perm, col_perm, permuted) = match sampling {
            Sampling::Leading => (None, None, None),
            Sampling::Random { seed } => {
                let mut rng = random::rng(seed);
                let rp = random::permutation(m, &mut rng);
                let cp = random::permutation(n, &mut rng);
                let p = Matrix::from_fn(m, n, |i, j| w[(rp[i], cp[j])]);
                (Some(rp), Some(cp), Some(p))
            }
        };
        let src = permuted.as_ref().unwrap_or(w);
        Ok(Self {
            a_w: src.submatrix(0, 0, r, r)?,
            b_w: src.submatrix(0, r, r, n - r)?,
            f_w: src.submatrix(r, 0, m - r, r)?,
            c_w: src.submatrix(r, r, m - r, n - r)?,
            r,
            m,
            n,
            row_perm,
            col_perm,
        })
    }

    /// Inverse of [`partition`](Self::partition), bit-exact.
    pub fn assemble(&self) -> Result<Matrix<T>> {
        let mut out = Matrix::zeros(self.m, self.n);
        out.set_submatrix(0, 0, &self.a_w)?;
        out.set_submatrix(0, self.r, &self.b_w)?;
        out.set_submatrix(self.r, 0, &self.f_w)?;
        out.set_submatrix(self.r, self.r, &self.c_w)?;
        Ok(self.to_original(out))
    }

    /// `[A_W; F_W]`, `m×r`, in partition coordinates.
    pub fn column_strip(&self) -> Result<Matrix<T>> {
        Matrix::vstack(&self.a_w, &self.f_w)
    }

    /// `[A_W  B_W]`, `r×n`, in partition coordinates.
    pub fn row_strip(&self) -> Result<Matrix<T>> {
        Matrix::hstack(&self.a_w, &self.b_w)
    }

    pub fn is_permuted(&self) -> bool {
        self.row_perm.is_some() || self.col_perm.is_some()
    }

    /// Maps an `m×n` matrix from partition coordinates back to the input's.
    pub fn to_original(&self, m: Matrix<T>) -> Matrix<T> {
        scatter(m, self.row_perm.as_deref(), self.col_perm.as_deref())
    }
}

/// Free-function form of [`MatrixBlocks::partition`].
pub fn partition<T: Scalar>(w: &Matrix<T>, r: usize, sampling: Sampling) -> Result<MatrixBlocks<T>> {
    MatrixBlocks::partition(w, r, sampling)
}

/// Sample-block SVD with its singular vectors extended to every row and column.
#[derive(Debug, Clone, PartialEq)]
pub struct NystromFactors<T> {
    /// `m×r`: `[U; F_W·V·Λ⁻¹]`.
    pub u_hat: Matrix<T>,
    pub sigma: Vec<T>,
    /// `n×r`: `[V; B_Wᵀ·U·Λ⁻¹]`.
    pub v_hat: Matrix<T>,
    pub row_perm: Option<Vec<usize>>,
    pub col_perm: Option<Vec<usize>>,
}

impl<T: Scalar> NystromFactors<T> {
    /// `Û·diag(σ)·V̂ᵀ` in the original coordinates.
    pub fn reconstruct(&self) -> Result<Matrix<T>> {
        let w = self.u_hat.scale_columns(&self.sigma)?.matmul_t(&self.v_hat)?;
        Ok(scatter(w, self.row_perm.as_deref(), self.col_perm.as_deref()))
    }
}

/// Extends the singular vectors of `A_W` out of sample.
///
/// `sv_floor` is relative to the leading singular value of `A_W`: any
/// `σᵢ ≤ sv_floor·σ₁` is rejected.
pub fn extend_singular_vectors<T: Scalar>(
    blocks: &MatrixBlocks<T>,
    sv_floor: T,
) -> Result<NystromFactors<T>> {
    let svd = svd_square(&blocks.a_w)?;
    let floor = sv_floor * svd.sigma[0];
    if let Some((i, &s)) = svd
        .sigma
        .iter()
        .enumerate()
        .find(|(_, &s)| s <= floor || s == T::zero())
    {
        return Err(Error::DegenerateSample {
            index: i + 1,
            value: s.to_f64_lossy(),
            floor: floor.to_f64_lossy(),
        });
    }
    let inv: Vec<T> = svd.sigma.iter().map(|&s| T::one() / s).collect();
    // ũⁱ = F_W·hⁱ/λᵢ column by column, i.e. F_W·V·Λ⁻¹.
    let u_tail = blocks.f_w.matmul(&svd.v)?.scale_columns(&inv)?;
    let v_tail = blocks.b_w.t_matmul(&svd.u)?.scale_columns(&inv)?;
    Ok(NystromFactors {
        u_hat: Matrix::vstack(&svd.u, &u_tail)?,
        v_hat: Matrix::vstack(&svd.v, &v_tail)?,
        sigma: svd.sigma,
        row_perm: blocks.row_perm.clone(),
        col_perm: blocks.col_perm.clone(),
    })
}

/// Three-factor reconstruction `[A_W; F_W] · core · [A_W  B_W]`, returned in
/// the coordinates of the matrix that was partitioned.
pub fn nystrom_approximate<T: Scalar>(blocks: &MatrixBlocks<T>, core: Core<T>) -> Result<Matrix<T>> {
    let middle = match core {
        Core::Pseudoinverse { rank_tol } => pseudoinverse(&blocks.a_w, rank_tol)?,
        Core::RawSample => blocks.a_w.clone(),
    };
    let w_hat = blocks
        .column_strip()?
        .matmul(&middle)?
        .matmul(&blocks.row_strip()?)?;
    Ok(blocks.to_original(w_hat))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApproxError {
    pub absolute: f64,
    pub relative: f64,
}

/// `‖W − Ŵ‖_F` and its ratio to `max(‖W‖_F, ε)`.
pub fn approximation_error<T: Scalar>(w: &Matrix<T>, w_hat: &Matrix<T>) -> Result<ApproxError> {
    let absolute = w.sub(w_hat)?.frobenius_norm().to_f64_lossy();
    let scale = w.frobenius_norm().to_f64_lossy().max(f64::MIN_POSITIVE);
    Ok(ApproxError {
        absolute,
        relative: absolute / scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopMethod {
    Nystrom,
    FullSvd,
}

/// Leading-order operation counts with unit constants: `m·r + r² + r·n`
/// for the Nyström path and `max(m,n)·min(m,n)²` for a dense SVD.
pub fn flop_estimate(m: usize, n: usize, r: usize, method: FlopMethod) -> u128 {
    let (m, n, r) = (m as u128, n as u128, r as u128);
    match method {
        FlopMethod::Nystrom => m * r + r * r + r * n,
        FlopMethod::FullSvd => {
            let (big, small) = if m >= n { (m, n) } else { (n, m) };
            big * small * small
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random::{rng, standard_normal};

    #[test]
    fn identity_partition() {
        let b = MatrixBlocks::partition(&Matrix::<f64>::identity(4), 2, Sampling::Leading).unwrap();
        assert_eq!(b.a_w, Matrix::identity(2));
        assert_eq!(b.b_w, Matrix::zeros(2, 2));
        assert_eq!(b.f_w, Matrix::zeros(2, 2));
        assert_eq!(b.c_w, Matrix::identity(2));
    }

    #[test]
    fn rank_out_of_range() {
        let w = Matrix::<f64>::zeros(4, 6);
        for r in [0, 4, 5] {
            assert!(matches!(
                MatrixBlocks::partition(&w, r, Sampling::Leading),
                Err(Error::Shape(_))
            ));
        }
    }

    #[test]
    fn random_sampling_is_deterministic_and_invertible() {
        let w: Matrix<f64> = standard_normal(6, 5, &mut rng(1));
        let s = Sampling::Random { seed: 7 };
        let b1 = MatrixBlocks::partition(&w, 2, s).unwrap();
        let b2 = MatrixBlocks::partition(&w, 2, s).unwrap();
        assert_eq!(b1, b2);
        assert!(b1.is_permuted());
        assert_eq!(b1.assemble().unwrap(), w);
    }

    #[test]
    fn isolated_identity_block() {
        let mut w = Matrix::<f64>::zeros(5, 4);
        w.set_submatrix(0, 0, &Matrix::identity(2)).unwrap();
        let b = MatrixBlocks::partition(&w, 2, Sampling::Leading).unwrap();
        let f = extend_singular_vectors(&b, 1e-12).unwrap();
        let mut want_u = Matrix::zeros(5, 2);
        want_u.set_submatrix(0, 0, &Matrix::identity(2)).unwrap();
        let mut want_v = Matrix::zeros(4, 2);
        want_v.set_submatrix(0, 0, &Matrix::identity(2)).unwrap();
        assert_eq!(f.u_hat, want_u);
        assert_eq!(f.v_hat, want_v);
    }

    #[test]
    fn degenerate_sample_names_index() {
        let mut w = Matrix::<f64>::zeros(4, 4);
        w.set_submatrix(0, 0, &Matrix::from_diag(&[1.0, 1e-18])).unwrap();
        let b = MatrixBlocks::partition(&w, 2, Sampling::Leading).unwrap();
        match extend_singular_vectors(&b, 1e-12) {
            Err(Error::DegenerateSample { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected degenerate sample, got {other:?}"),
        }
    }

    #[test]
    fn identity_reconstruction_drops_corner() {
        let w = Matrix::<f64>::identity(4);
        let b = MatrixBlocks::partition(&w, 2, Sampling::Leading).unwrap();
        let w_hat = nystrom_approximate(&b, Core::Pseudoinverse { rank_tol: 1e-10 }).unwrap();
        assert_eq!(w_hat, Matrix::from_diag(&[1.0, 1.0, 0.0, 0.0]));
        let err = approximation_error(&w, &w_hat).unwrap();
        assert!((err.absolute - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn raw_core_equals_pinv_for_identity_sample() {
        let mut w: Matrix<f64> = standard_normal(6, 7, &mut rng(3));
        w.set_submatrix(0, 0, &Matrix::identity(3)).unwrap();
        let b = MatrixBlocks::partition(&w, 3, Sampling::Leading).unwrap();
        let raw = nystrom_approximate(&b, Core::RawSample).unwrap();
        let pinv = nystrom_approximate(&b, Core::Pseudoinverse { rank_tol: 1e-10 }).unwrap();
        assert_eq!(raw, pinv);
    }

    #[test]
    fn error_metric_cases() {
        let w = Matrix::<f64>::identity(2);
        assert_eq!(
            approximation_error(&w, &w).unwrap(),
            ApproxError { absolute: 0.0, relative: 0.0 }
        );
        let e = approximation_error(&w, &Matrix::zeros(2, 2)).unwrap();
        assert!((e.absolute - 2f64.sqrt()).abs() < 1e-15);
        assert!((e.relative - 1.0).abs() < 1e-15);
        assert!(approximation_error(&w, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn error_metric_matches_elementwise_sum() {
        let mut g = rng(5);
        let a: Matrix<f64> = standard_normal(7, 3, &mut g);
        let b: Matrix<f64> = standard_normal(7, 3, &mut g);
        let mut sq = 0.0;
        let mut wsq = 0.0;
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            sq += (x - y) * (x - y);
            wsq += x * x;
        }
        let e = approximation_error(&a, &b).unwrap();
        assert!((e.absolute - sq.sqrt()).abs() < 1e-12);
        assert!((e.relative - sq.sqrt() / wsq.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn flop_counts() {
        assert_eq!(flop_estimate(4096, 4096, 128, FlopMethod::Nystrom), 1_064_960);
        assert_eq!(flop_estimate(4096, 4096, 128, FlopMethod::FullSvd), 68_719_476_736);
        assert_eq!(flop_estimate(2, 2, 1, FlopMethod::Nystrom), 5);
        assert_eq!(
            flop_estimate(10, 30, 2, FlopMethod::FullSvd),
            flop_estimate(30, 10, 2, FlopMethod::FullSvd)
        );
        assert_eq!(flop_estimate(30, 10, 2, FlopMethod::FullSvd), 3000);
    }
}
