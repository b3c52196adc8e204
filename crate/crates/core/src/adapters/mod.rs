//! LoRA, SLoRA and NLoRA adapters over a frozen dense weight.
//!
//! An adapter adds `s·A·B` (LoRA) or `s·A·N·B` (SLoRA, NLoRA) to a frozen
//! base `W` of shape `m×n`, with `s = alpha / rank`. The forward pass maps a
//! `batch×m` input `X` to `X·W + s·((X·A)·N)·B`; the `m×n` update is never
//! materialised outside [`Adapter::merge`] and [`Adapter::delta`].

mod checkpoint;
mod layout;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{pseudoinverse, random, Matrix};
use crate::nystrom::{extend_singular_vectors, MatrixBlocks, Sampling};
use crate::scalar::Scalar;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};
pub use layout::{ModelLayout, Site, LLAMA2_7B_LAYOUT};

/// Standard deviation of the Gaussian used for the `A` factor of LoRA/SLoRA.
pub const DEFAULT_A_STD: f64 = 0.02;

macro_rules! str_enum {
    ($name:ident { $($variant:ident => $text:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().replace('_', "-").as_str() {
                    $($text $(| $alias)* => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), other
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text,)+ })
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Lora,
    Slora,
    Nlora,
}

str_enum!(Variant { Lora => "lora", Slora => "slora", Nlora => "nlora" });

impl Variant {
    pub fn has_intermediate(self) -> bool {
        !matches!(self, Variant::Lora)
    }
}

/// Initialisation of the SLoRA intermediate matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NInit {
    /// Uniform on `[-√(1/r), √(1/r)]`.
    #[default]
    Kaiming,
    /// `N(0, 1/r)`.
    Gaussian,
}

str_enum!(NInit { Kaiming => "kaiming", Gaussian => "gaussian" });

/// Which middle factor NLoRA starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NloraCore {
    /// `N ← A_W`.
    #[default]
    RawSample,
    /// `N ← A_W⁺`.
    Pseudoinverse,
}

str_enum!(NloraCore { RawSample => "raw-sample" | "raw", Pseudoinverse => "pseudoinverse" | "pinv" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMask {
    #[default]
    All,
    /// Only `N` is trained; `A` and `B` are frozen.
    IntermediateOnly,
}

str_enum!(TrainMask { All => "all", IntermediateOnly => "intermediate-only" });

/// One of the three adapter factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    A,
    N,
    B,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::A, Slot::N, Slot::B];

    pub fn name(self) -> &'static str {
        match self {
            Slot::A => "A",
            Slot::N => "N",
            Slot::B => "B",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub variant: Variant,
    pub n_init: NInit,
    pub nlora_core: NloraCore,
    /// NLoRA only: replace the base by `base − s·A·N·B` at init.
    pub subtract_at_init: bool,
    pub train_mask: TrainMask,
    pub a_init_std: f64,
    /// Relative singular-value cutoff for the pseudoinverse core.
    pub rank_tol: f64,
    /// Relative floor on the sample block's singular values (pseudoinverse core).
    pub sv_floor: f64,
}

impl AdapterConfig {
    /// Defaults with `alpha == rank`, no dropout, every factor trainable.
    pub fn new(variant: Variant, rank: usize) -> Self {
        Self {
            rank,
            alpha: rank as f64,
            dropout: 0.0,
            variant,
            n_init: NInit::default(),
            nlora_core: NloraCore::default(),
            subtract_at_init: true,
            train_mask: TrainMask::default(),
            a_init_std: DEFAULT_A_STD,
            rank_tol: crate::linalg::DEFAULT_RANK_TOL,
            sv_floor: crate::nystrom::DEFAULT_SV_FLOOR,
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.train_mask == TrainMask::IntermediateOnly && !self.variant.has_intermediate() {
            return Err(Error::Config(
                "intermediate-only training needs an intermediate matrix (slora or nlora)".into(),
            ));
        }
        if !(self.a_init_std.is_finite() && self.a_init_std >= 0.0) {
            return Err(Error::Config("a_init_std must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn frozen(&self) -> Frozen {
        match self.train_mask {
            TrainMask::All => Frozen::default(),
            TrainMask::IntermediateOnly => Frozen {
                a: true,
                n: false,
                b: true,
            },
        }
    }
}

/// Set of factors excluded from optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Frozen {
    pub a: bool,
    pub n: bool,
    pub b: bool,
}

impl Frozen {
    pub fn contains(&self, slot: Slot) -> bool {
        match slot {
            Slot::A => self.a,
            Slot::N => self.n,
            Slot::B => self.b,
        }
    }
}

/// Gradients of a scalar loss with respect to the adapter factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads<T> {
    pub a: Matrix<T>,
    pub n: Option<Matrix<T>>,
    pub b: Matrix<T>,
}

impl<T: Scalar> AdapterGrads<T> {
    pub fn get(&self, slot: Slot) -> Option<&Matrix<T>> {
        match slot {
            Slot::A => Some(&self.a),
            Slot::N => self.n.as_ref(),
            Slot::B => Some(&self.b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T> {
    a: Matrix<T>,
    n: Option<Matrix<T>>,
    b: Matrix<T>,
    base: Matrix<T>,
    config: AdapterConfig,
    frozen: Frozen,
}

fn check_rank(base_shape: (usize, usize), rank: usize) -> Result<()> {
    let (m, n) = base_shape;
    if rank == 0 || rank >= m.min(n) {
        return Err(shape_err!("rank {rank} must satisfy 0 < r < min({m}, {n})"));
    }
    Ok(())
}

fn expect_variant(config: &AdapterConfig, want: Variant) -> Result<()> {
    if config.variant != want {
        return Err(Error::Config(format!(
            "config variant is {}, expected {want}",
            config.variant
        )));
    }
    Ok(())
}

/// LoRA: `A ~ N(0, a_init_std²)`, `B = 0`.
pub fn init_lora<T: Scalar>(base: Matrix<T>, config: &AdapterConfig, seed: u64) -> Result<Adapter<T>> {
    expect_variant(config, Variant::Lora)?;
    config.validate()?;
    check_rank(base.shape(), config.rank)?;
    let mut rng = random::rng(seed);
    let (m, n) = base.shape();
    let a = random::gaussian(m, config.rank, config.a_init_std, &mut rng);
    Ok(Adapter {
        a,
        n: None,
        b: Matrix::zeros(config.rank, n),
        base,
        frozen: config.frozen(),
        config: config.clone(),
    })
}

/// SLoRA: `A`, `B` as LoRA, `N` per [`NInit`].
pub fn init_slora<T: Scalar>(base: Matrix<T>, config: &AdapterConfig, seed: u64) -> Result<Adapter<T>> {
    expect_variant(config, Variant::Slora)?;
    config.validate()?;
    check_rank(base.shape(), config.rank)?;
    let mut rng = random::rng(seed);
    let (m, n) = base.shape();
    let r = config.rank;
    let a = random::gaussian(m, r, config.a_init_std, &mut rng);
    let bound = (1.0 / r as f64).sqrt();
    let mid = match config.n_init {
        NInit::Kaiming => random::uniform(r, r, bound, &mut rng),
        NInit::Gaussian => random::gaussian(r, r, bound, &mut rng),
    };
    Ok(Adapter {
        a,
        n: Some(mid),
        b: Matrix::zeros(r, n),
        base,
        frozen: config.frozen(),
        config: config.clone(),
    })
}

/// NLoRA: `A ← [A_W; F_W]`, `N ← A_W` or `A_W⁺`, `B ← [A_W  B_W]` from the
/// leading `r×r` block of `base`.
pub fn init_nlora<T: Scalar>(base: Matrix<T>, config: &AdapterConfig) -> Result<Adapter<T>> {
    expect_variant(config, Variant::Nlora)?;
    config.validate()?;
    check_rank(base.shape(), config.rank)?;
    let blocks = MatrixBlocks::partition(&base, config.rank, Sampling::Leading)?;
    let mid = match config.nlora_core {
        NloraCore::RawSample => blocks.a_w.clone(),
        NloraCore::Pseudoinverse => {
            // Surfaces a degenerate sample block before inverting it.
            extend_singular_vectors(&blocks, T::lit(config.sv_floor))?;
            pseudoinverse(&blocks.a_w, T::lit(config.rank_tol))?
        }
    };
    let a = blocks.column_strip()?;
    let b = blocks.row_strip()?;
    let mut adapter = Adapter {
        a,
        n: Some(mid),
        b,
        base,
        frozen: config.frozen(),
        config: config.clone(),
    };
    if config.subtract_at_init {
        let delta = adapter.delta()?;
        adapter.base = adapter.base.sub(&delta)?;
    }
    Ok(adapter)
}

impl<T: Scalar> Adapter<T> {
    /// Dispatches on `config.variant`. `seed` is unused by NLoRA.
    pub fn init(base: Matrix<T>, config: &AdapterConfig, seed: u64) -> Result<Self> {
        match config.variant {
            Variant::Lora => init_lora(base, config, seed),
            Variant::Slora => init_slora(base, config, seed),
            Variant::Nlora => init_nlora(base, config),
        }
    }

    /// Reassembles an adapter from stored factors, checking shapes.
    pub fn from_parts(
        base: Matrix<T>,
        a: Matrix<T>,
        n: Option<Matrix<T>>,
        b: Matrix<T>,
        config: AdapterConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (m, cols) = base.shape();
        let r = config.rank;
        if a.shape() != (m, r) || b.shape() != (r, cols) {
            return Err(shape_err!(
                "factors A {:?} and B {:?} do not fit base {m}x{cols} at rank {r}",
                a.shape(),
                b.shape()
            ));
        }
        match (&n, config.variant.has_intermediate()) {
            (Some(mid), true) if mid.shape() == (r, r) => {}
            (None, false) => {}
            _ => {
                return Err(shape_err!(
                    "intermediate matrix does not match variant {} at rank {r}",
                    config.variant
                ))
            }
        }
        Ok(Self {
            a,
            n,
            b,
            base,
            frozen: config.frozen(),
            config,
        })
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn n(&self) -> Option<&Matrix<T>> {
        self.n.as_ref()
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn base(&self) -> &Matrix<T> {
        &self.base
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn frozen(&self) -> Frozen {
        self.frozen
    }

    pub fn scaling(&self) -> T {
        T::lit(self.config.scaling())
    }

    /// `(m, n)` of the base weight.
    pub fn shape(&self) -> (usize, usize) {
        self.base.shape()
    }

    pub fn param(&self, slot: Slot) -> Option<&Matrix<T>> {
        match slot {
            Slot::A => Some(&self.a),
            Slot::N => self.n.as_ref(),
            Slot::B => Some(&self.b),
        }
    }

    /// Mutable access to a factor, or `None` when it is frozen or absent.
    pub fn trainable_mut(&mut self, slot: Slot) -> Option<&mut Matrix<T>> {
        if self.frozen.contains(slot) {
            return None;
        }
        match slot {
            Slot::A => Some(&mut self.a),
            Slot::N => self.n.as_mut(),
            Slot::B => Some(&mut self.b),
        }
    }

    pub fn trainable_slots(&self) -> impl Iterator<Item = Slot> + '_ {
        Slot::ALL
            .into_iter()
            .filter(|&s| !self.frozen.contains(s) && self.param(s).is_some())
    }

    /// Number of scalars the optimizer may change, counted from the factors.
    pub fn trainable_param_count(&self) -> usize {
        self.trainable_slots()
            .map(|s| self.param(s).map_or(0, Matrix::len))
            .sum()
    }

    /// `N·B` (or `B` for LoRA), `r×n`.
    fn right_factor(&self) -> Result<Matrix<T>> {
        match &self.n {
            Some(mid) => mid.matmul(&self.b),
            None => Ok(self.b.clone()),
        }
    }

    /// `s·A·N·B`, `m×n`.
    pub fn delta(&self) -> Result<Matrix<T>> {
        Ok(self.a.matmul(&self.right_factor()?)?.scale(self.scaling()))
    }

    /// `base + s·A·N·B`.
    pub fn merge(&self) -> Result<Matrix<T>> {
        self.base.add(&self.delta()?)
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.base.rows() {
            return Err(shape_err!(
                "input has {} columns, adapter expects {}",
                x.cols(),
                self.base.rows()
            ));
        }
        Ok(())
    }

    /// `s·((X·A)·N)·B`.
    fn low_rank(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut h = x.matmul(&self.a)?;
        if let Some(mid) = &self.n {
            h = h.matmul(mid)?;
        }
        Ok(h.matmul(&self.b)?.scale(self.scaling()))
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.forward_split(x, x)
    }

    /// Forward pass where the low-rank branch sees `x_low` (e.g. a dropped-out
    /// copy of `x`) while the base sees `x`.
    pub fn forward_split(&self, x: &Matrix<T>, x_low: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        if x_low.shape() != x.shape() {
            return Err(shape_err!("low-rank input {:?} differs from {:?}", x_low.shape(), x.shape()));
        }
        let mut y = x.matmul(&self.base)?;
        y.add_assign_scaled(&self.low_rank(x_low)?, T::one())?;
        Ok(y)
    }

    /// Gradients of a loss `L(Y)` given `G = ∂L/∂Y`. `x` is the input the
    /// low-rank branch saw. Frozen factors get exact zeros.
    pub fn backward(&self, x: &Matrix<T>, grad_y: &Matrix<T>) -> Result<AdapterGrads<T>> {
        self.check_input(x)?;
        let (_, n) = self.base.shape();
        if grad_y.shape() != (x.rows(), n) {
            return Err(shape_err!(
                "grad_y {:?} does not match forward output {}x{n}",
                grad_y.shape(),
                x.rows()
            ));
        }
        let s = self.scaling();
        let r = self.config.rank;
        let xa = x.matmul(&self.a)?;
        // G·Bᵀ, batch×r.
        let gbt = grad_y.matmul_t(&self.b)?;

        let grad_b = if self.frozen.b {
            Matrix::zeros(r, n)
        } else {
            let xan = match &self.n {
                Some(mid) => xa.matmul(mid)?,
                None => xa.clone(),
            };
            xan.t_matmul(grad_y)?.scale(s)
        };

        let grad_n = match &self.n {
            None => None,
            Some(_) if self.frozen.n => Some(Matrix::zeros(r, r)),
            Some(_) => Some(xa.t_matmul(&gbt)?.scale(s)),
        };

        let grad_a = if self.frozen.a {
            Matrix::zeros(self.a.rows(), r)
        } else {
            // Xᵀ·(G·Bᵀ·Nᵀ) keeps every intermediate at rank width.
            let g_right = match &self.n {
                Some(mid) => gbt.matmul_t(mid)?,
                None => gbt,
            };
            x.t_matmul(&g_right)?.scale(s)
        };

        Ok(AdapterGrads {
            a: grad_a,
            n: grad_n,
            b: grad_b,
        })
    }

    /// `∂L/∂X` for chaining layers: `G·baseᵀ + (s·G·Bᵀ·Nᵀ·Aᵀ) ⊙ mask`, where
    /// `mask` is the dropout mask applied to the low-rank input, if any.
    pub fn input_grad(&self, grad_y: &Matrix<T>, mask: Option<&Matrix<T>>) -> Result<Matrix<T>> {
        let mut low = grad_y.matmul_t(&self.b)?;
        if let Some(mid) = &self.n {
            low = low.matmul_t(mid)?;
        }
        let mut low = low.matmul_t(&self.a)?.scale(self.scaling());
        if let Some(mask) = mask {
            if mask.shape() != low.shape() {
                return Err(shape_err!("dropout mask {:?} vs {:?}", mask.shape(), low.shape()));
            }
            for (x, &k) in low.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *x *= k;
            }
        }
        let mut out = grad_y.matmul_t(&self.base)?;
        out.add_assign_scaled(&low, T::one())?;
        Ok(out)
    }
}

/// Inverted-dropout mask: entries are `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<T: Scalar>(rows: usize, cols: usize, p: f64, rng: &mut random::Rng) -> Matrix<T> {
    use rand::Rng as _;
    let keep = T::lit(1.0 / (1.0 - p));
    Matrix::from_fn(rows, cols, |_, _| {
        if rng.gen::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}

/// Trainable scalars over every site of a layout.
pub fn trainable_params(layout: &ModelLayout, config: &AdapterConfig) -> u64 {
    let r = config.rank as u64;
    layout
        .sites
        .iter()
        .map(|site| {
            let (m, n) = (site.m as u64, site.n as u64);
            match (config.variant, config.train_mask) {
                (Variant::Lora, _) => r * (m + n),
                (_, TrainMask::All) => r * (m + n) + r * r,
                (_, TrainMask::IntermediateOnly) => r * r,
            }
        })
        .sum()
}
