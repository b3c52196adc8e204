//! Synthetic teacher–student problems the trainer optimises.

use serde::{Deserialize, Serialize};

use crate::adapters::{dropout_mask, Adapter, AdapterGrads};
use crate::error::{Error, Result};
use crate::linalg::random::{self, Rng};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Recover `T = base + G` where `G` is a random rank-`k` perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecovery {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Entry std of the base weight.
    pub base_std: f64,
    /// Entry std of `G`.
    pub perturbation_std: f64,
    /// Rows of the fixed probe set the logged loss is measured on.
    pub probe_rows: usize,
}

impl Default for MatrixRecovery {
    fn default() -> Self {
        Self {
            m: 64,
            n: 64,
            k: 8,
            base_std: 0.125,
            perturbation_std: 0.02,
            probe_rows: 64,
        }
    }
}

/// Two dense layers `relu(X·W1)·W2`, each carrying an adapter, fitted to a
/// frozen teacher whose weights differ from the student base by rank-`k`
/// perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentMlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub k: usize,
    pub perturbation_std: f64,
    pub probe_rows: usize,
}

impl Default for StudentMlp {
    fn default() -> Self {
        Self {
            input: 32,
            hidden: 64,
            output: 16,
            k: 4,
            perturbation_std: 0.02,
            probe_rows: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Task {
    MatrixRecovery(MatrixRecovery),
    StudentMlp(StudentMlp),
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::MatrixRecovery(_) => "matrix_recovery",
            Task::StudentMlp(_) => "student_mlp",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            Task::MatrixRecovery(t) => {
                if t.m == 0 || t.n == 0 || t.probe_rows == 0 {
                    return bad("matrix_recovery needs positive m, n and probe_rows".into());
                }
                if t.k > t.m.min(t.n) {
                    return bad(format!("perturbation rank {} exceeds min(m, n)", t.k));
                }
                if !(t.base_std >= 0.0 && t.perturbation_std >= 0.0) {
                    return bad("scales must be non-negative".into());
                }
            }
            Task::StudentMlp(t) => {
                if t.input == 0 || t.hidden == 0 || t.output == 0 || t.probe_rows == 0 {
                    return bad("student_mlp needs positive layer widths and probe_rows".into());
                }
                if t.k > t.input.min(t.hidden).min(t.hidden.min(t.output)) {
                    return bad(format!("perturbation rank {} exceeds a layer width", t.k));
                }
                if t.perturbation_std < 0.0 {
                    return bad("scales must be non-negative".into());
                }
            }
        }
        Ok(())
    }

    /// Input width of the first adapter site.
    pub fn input_dim(&self) -> usize {
        match self {
            Task::MatrixRecovery(t) => t.m,
            Task::StudentMlp(t) => t.input,
        }
    }
}

/// Rank-`k` matrix `P·Q` whose entries have standard deviation `std`.
fn low_rank_perturbation<T: Scalar>(m: usize, n: usize, k: usize, std: f64, rng: &mut Rng) -> Result<Matrix<T>> {
    if k == 0 {
        return Ok(Matrix::zeros(m, n));
    }
    let factor_std = (std / (k as f64).sqrt()).sqrt();
    let p = random::gaussian::<T>(m, k, factor_std, rng);
    let q = random::gaussian::<T>(k, n, factor_std, rng);
    p.matmul(&q)
}

/// Realised problem: base weights per site plus what the loss compares against.
pub(crate) struct Problem<T> {
    pub sites: Vec<(String, Matrix<T>)>,
    kind: ProblemKind<T>,
    probe: Matrix<T>,
}

enum ProblemKind<T> {
    Recovery { target: Matrix<T> },
    Mlp { teacher1: Matrix<T>, teacher2: Matrix<T> },
}

/// Per-step outputs of [`Problem::loss_and_grads`].
pub(crate) struct StepEval<T> {
    pub loss: f64,
    pub grads: Vec<AdapterGrads<T>>,
}

fn relu<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    m.map(|x| if x > T::zero() { x } else { T::zero() })
}

fn half_mean_sq<T: Scalar>(resid: &Matrix<T>) -> f64 {
    let sum: f64 = resid.as_slice().iter().map(|&x| {
        let v = x.to_f64_lossy();
        v * v
    }).sum();
    0.5 * sum / resid.rows() as f64
}

fn apply_mask<T: Scalar>(x: &Matrix<T>, mask: &Option<Matrix<T>>) -> Matrix<T> {
    match mask {
        None => x.clone(),
        Some(mask) => {
            let mut out = x.clone();
            for (v, &k) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *v *= k;
            }
            out
        }
    }
}

impl<T: Scalar> Problem<T> {
    pub fn build(task: &Task, seed: u64) -> Result<Self> {
        task.validate()?;
        let mut rng = random::rng(seed);
        match *task {
            Task::MatrixRecovery(t) => {
                let base = random::gaussian::<T>(t.m, t.n, t.base_std, &mut rng);
                let g = low_rank_perturbation(t.m, t.n, t.k, t.perturbation_std, &mut rng)?;
                let target = base.add(&g)?;
                let probe = random::standard_normal(t.probe_rows, t.m, &mut rng);
                Ok(Self {
                    sites: vec![("weight".into(), base)],
                    kind: ProblemKind::Recovery { target },
                    probe,
                })
            }
            Task::StudentMlp(t) => {
                let w1 = random::gaussian::<T>(t.input, t.hidden, 1.0 / (t.input as f64).sqrt(), &mut rng);
                let w2 = random::gaussian::<T>(t.hidden, t.output, 1.0 / (t.hidden as f64).sqrt(), &mut rng);
                let g1 = low_rank_perturbation(t.input, t.hidden, t.k, t.perturbation_std, &mut rng)?;
                let g2 = low_rank_perturbation(t.hidden, t.output, t.k, t.perturbation_std, &mut rng)?;
                let teacher1 = w1.add(&g1)?;
                let teacher2 = w2.add(&g2)?;
                let probe = random::standard_normal(t.probe_rows, t.input, &mut rng);
                Ok(Self {
                    sites: vec![("layer1".into(), w1), ("layer2".into(), w2)],
                    kind: ProblemKind::Mlp { teacher1, teacher2 },
                    probe,
                })
            }
        }
    }

    fn reference(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        match &self.kind {
            ProblemKind::Recovery { target } => x.matmul(target),
            ProblemKind::Mlp { teacher1, teacher2 } => relu(&x.matmul(teacher1)?).matmul(teacher2),
        }
    }

    /// `½·mean_rows‖student(X) − reference(X)‖²` on the probe set.
    pub fn probe_loss(&self, adapters: &[Adapter<T>]) -> Result<f64> {
        let y = self.predict(adapters, &self.probe)?;
        Ok(half_mean_sq(&y.sub(&self.reference(&self.probe)?)?))
    }

    pub fn predict(&self, adapters: &[Adapter<T>], x: &Matrix<T>) -> Result<Matrix<T>> {
        match &self.kind {
            ProblemKind::Recovery { .. } => adapters[0].forward(x),
            ProblemKind::Mlp { .. } => {
                let h = relu(&adapters[0].forward(x)?);
                adapters[1].forward(&h)
            }
        }
    }

    /// Loss on batch `x` and its gradients, with dropout on each low-rank
    /// input when `dropout > 0`.
    pub fn loss_and_grads(
        &self,
        adapters: &[Adapter<T>],
        x: &Matrix<T>,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<StepEval<T>> {
        let rows = T::from_usize(x.rows()).expect("batch size");
        let mut mask_for = |m: &Matrix<T>| {
            (dropout > 0.0).then(|| dropout_mask::<T>(m.rows(), m.cols(), dropout, rng))
        };
        match &self.kind {
            ProblemKind::Recovery { .. } => {
                let mask = mask_for(x);
                let x_low = apply_mask(x, &mask);
                let y = adapters[0].forward_split(x, &x_low)?;
                let resid = y.sub(&self.reference(x)?)?;
                let loss = half_mean_sq(&resid);
                let grad_y = resid.map(|v| v / rows);
                let grads = vec![adapters[0].backward(&x_low, &grad_y)?];
                Ok(StepEval { loss, grads })
            }
            ProblemKind::Mlp { .. } => {
                let mask1 = mask_for(x);
                let x_low = apply_mask(x, &mask1);
                let pre = adapters[0].forward_split(x, &x_low)?;
                let h = relu(&pre);
                let mask2 = mask_for(&h);
                let h_low = apply_mask(&h, &mask2);
                let y = adapters[1].forward_split(&h, &h_low)?;
                let resid = y.sub(&self.reference(x)?)?;
                let loss = half_mean_sq(&resid);
                let grad_y = resid.map(|v| v / rows);
                let grads2 = adapters[1].backward(&h_low, &grad_y)?;
                let grad_h = adapters[1].input_grad(&grad_y, mask2.as_ref())?;
                let mut grad_pre = grad_h;
                for (g, &p) in grad_pre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if p <= T::zero() {
                        *g = T::zero();
                    }
                }
                let grads1 = adapters[0].backward(&x_low, &grad_pre)?;
                Ok(StepEval {
                    loss,
                    grads: vec![grads1, grads2],
                })
            }
        }
    }
}
