//! Wall-clock comparison of adapter initialisation strategies.
//!
//! `svd_full` is the cost model for SVD-based initialisation: a full SVD of
//! the base, truncated to rank `r`, split into `U_r·√Σ` and `√Σ·V_rᵀ`, and
//! the residual base formed from them.

use std::time::Instant;

use faer::Mat;
use serde::Serialize;

use crate::adapters::{init_lora, init_nlora, init_slora, AdapterConfig, NloraCore, Variant};
use crate::error::{Error, Result};
use crate::linalg::random;
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MedianMs {
    pub lora: f64,
    pub slora: f64,
    pub nlora_raw: f64,
    pub nlora_pinv: f64,
    pub svd_full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub reps: usize,
    pub seed: u64,
    pub median_ms: MedianMs,
    /// `svd_full / nlora_raw`.
    pub svd_over_nlora: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

fn time_reps(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(samples))
}

/// Truncated-SVD initialisation of `base`; returns `(A, B, residual)`.
pub fn svd_init(base: &Matrix<f64>, r: usize) -> Result<(Matrix<f64>, Matrix<f64>, Matrix<f64>)> {
    let (m, n) = base.shape();
    let w = Mat::<f64>::from_fn(m, n, |i, j| base[(i, j)]);
    let svd = w.svd().map_err(|_| Error::Convergence {
        sweeps: 0,
        residual: f64::NAN,
    })?;
    let (u, s, v) = (svd.U(), svd.S(), svd.V());
    let root: Vec<f64> = (0..r).map(|k| s[k].sqrt()).collect();
    let a = Matrix::from_fn(m, r, |i, k| u[(i, k)] * root[k]);
    let b = Matrix::from_fn(r, n, |k, j| root[k] * v[(j, k)]);
    let residual = base.sub(&a.matmul(&b)?)?;
    Ok((a, b, residual))
}

/// Median wall-ms per strategy over `reps` runs on a seeded Gaussian base.
/// Every strategy runs on the calling thread.
pub fn bench_init(m: usize, n: usize, r: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    if reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    if r == 0 || r > m.min(n) {
        return Err(Error::Config(format!("rank {r} must lie in 1..={}", m.min(n))));
    }
    faer::set_global_parallelism(faer::Par::Seq);
    let base: Matrix<f64> = random::standard_normal(m, n, &mut random::rng(seed));

    let lora_cfg = AdapterConfig::new(Variant::Lora, r);
    let slora_cfg = AdapterConfig::new(Variant::Slora, r);
    let raw_cfg = AdapterConfig::new(Variant::Nlora, r);
    let pinv_cfg = AdapterConfig {
        nlora_core: NloraCore::Pseudoinverse,
        ..raw_cfg.clone()
    };

    let lora = time_reps(reps, || init_lora(base.clone(), &lora_cfg, seed).map(drop))?;
    let slora = time_reps(reps, || init_slora(base.clone(), &slora_cfg, seed).map(drop))?;
    let nlora_raw = time_reps(reps, || init_nlora(base.clone(), &raw_cfg).map(drop))?;
    let nlora_pinv = time_reps(reps, || init_nlora(base.clone(), &pinv_cfg).map(drop))?;
    let svd_full = time_reps(reps, || svd_init(&base, r).map(drop))?;

    Ok(BenchReport {
        m,
        n,
        rank: r,
        reps,
        seed,
        median_ms: MedianMs {
            lora,
            slora,
            nlora_raw,
            nlora_pinv,
            svd_full,
        },
        svd_over_nlora: svd_full / nlora_raw,
    })
}
