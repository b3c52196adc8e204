//! Nyström matrix approximation and the LoRA / SLoRA / NLoRA adapter family.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for callers that do not care.

pub mod adapters;
pub mod bench;
pub mod error;
pub mod linalg;
pub mod nystrom;
pub mod scalar;
pub mod trainer;

pub use adapters::{Adapter, AdapterConfig, AdapterGrads, Variant};
pub use error::{Error, Result};
pub use linalg::{Matrix, Svd};
pub use nystrom::{MatrixBlocks, NystromFactors};
pub use scalar::{Precision, Scalar};

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type MatrixBlocks64 = MatrixBlocks<f64>;
pub type NystromFactors64 = NystromFactors<f64>;
pub type Adapter32 = Adapter<f32>;
pub type Adapter64 = Adapter<f64>;
