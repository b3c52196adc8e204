//! Seeded random matrices. All randomness in the crate flows through
//! [`Rng`] so that a seed fully determines every result.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries drawn from `N(0, std²)` in `f64`, then rounded to `T`.
pub fn gaussian<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix<T> {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Matrix::from_fn(rows, cols, |_, _| T::lit(dist.sample(rng)))
}

pub fn standard_normal<T: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        T::lit(x)
    })
}

/// Entries uniform on `[-bound, bound)`.
pub fn uniform<T: Scalar>(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.gen_range(-bound..bound)))
}

pub fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
