//! Dense matrix kernels: storage, products, norms, SVD and pseudoinverse.

mod matrix;
pub mod io;
pub mod random;
mod svd;

pub use matrix::{frobenius_norm, matmul, Matrix};
pub use svd::{pseudoinverse, pseudoinverse_from_svd, svd_square, Svd, DEFAULT_RANK_TOL, MAX_SWEEPS};
