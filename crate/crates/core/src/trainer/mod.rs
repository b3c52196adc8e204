//! Deterministic desk-scale training of adapters on synthetic tasks.
//!
//! A run is fully determined by its [`Task`], [`AdapterConfig`] and
//! [`TrainConfig`] (including the seed). The logged loss is measured on a
//! fixed probe set so that it is comparable across steps.

mod optim;
mod schedule;
mod tasks;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterConfig, Checkpoint};
use crate::error::{Error, Result};
use crate::linalg::random;
use crate::scalar::{Precision, Scalar};

pub use optim::{
    adamw_step, rmsprop_step, AdamHyper, Moments, OptimizerKind, OptimizerState, ParamKey, RmsPropHyper,
};
pub use schedule::{lr_schedule, warmup_steps};
pub use tasks::{MatrixRecovery, StudentMlp, Task};

use tasks::Problem;

/// Loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// IntTune learning rate for generation tasks.
pub const INTTUNE_LEARNING_RATE: f64 = 2e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Log every this many steps; step 0 and the final step are always logged.
    pub log_every: usize,
    /// When false, `wall_ms` is written as 0 so logs are byte-reproducible.
    pub record_wall_time: bool,
    pub adam: AdamHyper,
    pub rmsprop: RmsPropHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            learning_rate: 2e-4,
            batch_size: 4,
            warmup_ratio: 0.03,
            total_steps: 2000,
            weight_decay: 0.0,
            seed: 0,
            precision: Precision::F64,
            log_every: 10,
            record_wall_time: true,
            adam: AdamHyper::default(),
            rmsprop: RmsPropHyper::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with the IntTune learning rate.
    pub fn inttune() -> Self {
        Self {
            learning_rate: INTTUNE_LEARNING_RATE,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.log_every == 0 {
            return bad("batch_size, total_steps and log_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio must lie in [0, 1), got {}", self.warmup_ratio));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and >= 0".into());
        }
        if self.optimizer == OptimizerKind::RmsProp && self.weight_decay > 0.0 {
            return bad("weight decay is only supported with adamw".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_schedule(step, self.total_steps, self.warmup_ratio, self.learning_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

pub const CSV_HEADER: &str = "step,loss,lr,wall_ms";

impl MetricLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{:e},{:e},{:.3}", r.step, r.loss, r.lr, r.wall_ms);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// The log without wall-clock times, for reproducibility checks.
    pub fn deterministic_part(&self) -> Vec<(usize, u64, u64)> {
        self.rows
            .iter()
            .map(|r| (r.step, r.loss.to_bits(), r.lr.to_bits()))
            .collect()
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn loss_at(&self, step: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.step == step).map(|r| r.loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub step: usize,
    pub optimizer: OptimizerState<T>,
    pub log: MetricLog,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Divergence {
    pub step: usize,
    pub loss: f64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct RunReport<T> {
    pub state: TrainState<T>,
    pub initial: Vec<(String, Adapter<T>)>,
    pub adapters: Vec<(String, Adapter<T>)>,
    /// Set when the run stopped early; the log holds everything up to that point.
    pub diverged: Option<Divergence>,
}

impl<T: Scalar> RunReport<T> {
    pub fn checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        Checkpoint::from_adapters(&self.adapters, seed)
    }

    pub fn initial_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        Checkpoint::from_adapters(&self.initial, seed)
    }
}

fn diverging(loss: f64) -> bool {
    !loss.is_finite() || loss > DIVERGENCE_LOSS
}

// Independent random streams derived from the run seed.
const STREAM_INIT: u64 = 0x1d1e_a5ed_0000_0001;
const STREAM_BATCH: u64 = 0x1d1e_a5ed_0000_0002;
const STREAM_DROPOUT: u64 = 0x1d1e_a5ed_0000_0003;

/// Trains adapters on `task` and returns the full log and final factors.
pub fn run_task<T: Scalar>(task: &Task, adapter: &AdapterConfig, cfg: &TrainConfig) -> Result<RunReport<T>> {
    cfg.validate()?;
    adapter.validate()?;
    if cfg.precision.code() != T::PRECISION_CODE {
        return Err(Error::Config(format!(
            "config asks for {} but the run is instantiated at {}",
            cfg.precision,
            T::NAME
        )));
    }
    let problem = Problem::<T>::build(task, cfg.seed)?;
    let mut adapters = Vec::with_capacity(problem.sites.len());
    for (i, (_, base)) in problem.sites.iter().enumerate() {
        let seed = (cfg.seed ^ STREAM_INIT).wrapping_add(i as u64);
        adapters.push(Adapter::init(base.clone(), adapter, seed)?);
    }
    let names: Vec<String> = problem.sites.iter().map(|(n, _)| n.clone()).collect();
    let initial: Vec<(String, Adapter<T>)> = names.iter().cloned().zip(adapters.iter().cloned()).collect();

    let mut state = TrainState {
        step: 0,
        optimizer: OptimizerState::new(cfg.optimizer),
        log: MetricLog::default(),
    };
    let mut batch_rng = random::rng(cfg.seed ^ STREAM_BATCH);
    let mut dropout_rng = random::rng(cfg.seed ^ STREAM_DROPOUT);
    let start = Instant::now();
    let wall = |start: &Instant| {
        if cfg.record_wall_time {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        }
    };
    let mut diverged = None;

    for step in 0..cfg.total_steps {
        state.step = step;
        let lr = cfg.lr_at(step);
        if step % cfg.log_every == 0 {
            let loss = problem.probe_loss(&adapters)?;
            state.log.rows.push(MetricRow {
                step,
                loss,
                lr,
                wall_ms: wall(&start),
            });
            if diverging(loss) {
                diverged = Some(Divergence {
                    step,
                    loss,
                    reason: "probe loss diverged".into(),
                });
                break;
            }
        }
        let x = random::standard_normal::<T>(cfg.batch_size, task.input_dim(), &mut batch_rng);
        let eval = match problem.loss_and_grads(&adapters, &x, adapter.dropout, &mut dropout_rng) {
            Ok(e) => e,
            Err(Error::NonFinite(what)) => {
                diverged = Some(Divergence {
                    step,
                    loss: f64::NAN,
                    reason: format!("non-finite {what}"),
                });
                break;
            }
            Err(e) => return Err(e),
        };
        if diverging(eval.loss) {
            state.log.rows.push(MetricRow {
                step,
                loss: eval.loss,
                lr,
                wall_ms: wall(&start),
            });
            diverged = Some(Divergence {
                step,
                loss: eval.loss,
                reason: "batch loss diverged".into(),
            });
            break;
        }
        let stepped = match cfg.optimizer {
            OptimizerKind::AdamW => adamw_step(&mut state.optimizer, &mut adapters, &eval.grads, lr, &cfg.adam),
            OptimizerKind::RmsProp => {
                rmsprop_step(&mut state.optimizer, &mut adapters, &eval.grads, lr, &cfg.rmsprop)
            }
        };
        match stepped {
            Ok(()) => {}
            Err(Error::NonFinite(what)) => {
                diverged = Some(Divergence {
                    step,
                    loss: eval.loss,
                    reason: format!("non-finite {what}"),
                });
                break;
            }
            Err(e) => return Err(e),
        }
    }

    if diverged.is_none() {
        state.step = cfg.total_steps;
        let loss = match problem.probe_loss(&adapters) {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        state.log.rows.push(MetricRow {
            step: cfg.total_steps,
            loss,
            lr: cfg.lr_at(cfg.total_steps),
            wall_ms: wall(&start),
        });
        if diverging(loss) {
            diverged = Some(Divergence {
                step: cfg.total_steps,
                loss,
                reason: "final probe loss diverged".into(),
            });
        }
    }

    Ok(RunReport {
        state,
        initial,
        adapters: names.into_iter().zip(adapters).collect(),
        diverged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub rank: usize,
    pub csv: PathBuf,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub diverged: bool,
}

/// Runs the same task once per rank (with `alpha = rank`) and writes
/// `metrics_r<rank>.csv` for each into `dir`.
pub fn rank_sweep<T: Scalar>(
    task: &Task,
    adapter: &AdapterConfig,
    cfg: &TrainConfig,
    ranks: &[usize],
    dir: impl AsRef<Path>,
) -> Result<Vec<SweepEntry>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(ranks.len());
    for &rank in ranks {
        let ad_cfg = AdapterConfig {
            rank,
            alpha: rank as f64,
            ..adapter.clone()
        };
        let report = run_task::<T>(task, &ad_cfg, cfg)?;
        let csv = dir.join(format!("metrics_r{rank}.csv"));
        report.state.log.write_csv(&csv)?;
        out.push(SweepEntry {
            rank,
            csv,
            initial_loss: report.state.log.first_loss().unwrap_or(f64::NAN),
            final_loss: report.state.log.last_loss().unwrap_or(f64::NAN),
            diverged: report.diverged.is_some(),
        });
    }
    Ok(out)
}
