use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use nlora_core::adapters::{trainable_params, Adapter, AdapterConfig, Checkpoint, ModelLayout, NloraCore, Variant};
use nlora_core::linalg::io::{self, AnyMatrix};
use nlora_core::linalg::{Matrix, DEFAULT_RANK_TOL};
use nlora_core::nystrom::{
    approximation_error, flop_estimate, nystrom_approximate, Core, FlopMethod, MatrixBlocks, Sampling,
};
use nlora_core::trainer::{rank_sweep, run_task, MatrixRecovery, StudentMlp, Task, TrainConfig};
use nlora_core::{Precision, Scalar};

use crate::config::Settings;
use crate::{AdapterArgs, ApproxArgs, BenchArgs, Common, InitArgs, ParamsArgs, TrainArgs};

/// A run that finished its bookkeeping but failed numerically.
#[derive(Debug)]
struct NumericFailure(String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// 3 for numeric failures anywhere in the chain, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|cause| {
        cause.is::<NumericFailure>()
            || cause
                .downcast_ref::<nlora_core::Error>()
                .is_some_and(nlora_core::Error::is_numeric)
    });
    if numeric {
        3
    } else {
        2
    }
}

macro_rules! cli_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum $name { $($variant),+ }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s.trim().replace('_', "-").to_ascii_lowercase().as_str() {
                    $($text => Ok(Self::$variant),)+
                    other => Err(format!(
                        concat!("unknown ", stringify!($name), " `{}`, expected one of: ", $($text, " "),+),
                        other
                    )),
                }
            }
        }
    };
}

cli_enum!(SamplingArg { Leading => "leading", Random => "random" });
cli_enum!(TaskKind { MatrixRecovery => "matrix-recovery", StudentMlp => "student-mlp" });

fn manifest_beside(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

fn write_manifest(command: &str, settings: &Settings, path: Option<&Path>) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": settings.resolved(),
    });
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing manifest {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn settings_for(common: &Common) -> Result<Settings> {
    Settings::load(common.config.as_deref())
}

fn adapter_config(s: &mut Settings, a: &AdapterArgs, default_variant: Variant) -> Result<AdapterConfig> {
    let variant = s.get("variant", a.variant, default_variant)?;
    let rank = s.get("rank", a.rank, 8usize)?;
    let mut cfg = AdapterConfig::new(variant, rank);
    cfg.alpha = s.get("alpha", a.alpha, rank as f64)?;
    cfg.n_init = s.get("n_init", a.n_init, cfg.n_init)?;
    cfg.nlora_core = s.get("nlora_core", a.nlora_core, cfg.nlora_core)?;
    cfg.subtract_at_init = s.get("subtract_at_init", a.subtract_at_init, cfg.subtract_at_init)?;
    cfg.train_mask = s.get("train_mask", a.train_mask, cfg.train_mask)?;
    cfg.dropout = s.get("dropout", a.dropout, cfg.dropout)?;
    Ok(cfg)
}

#[derive(Serialize)]
struct ApproxRecord {
    abs_err: f64,
    rel_err: f64,
    flops_nystrom: u64,
    flops_svd: u64,
}

fn approx_typed<T: Scalar>(w: &Matrix<T>, rank: usize, core: Core<T>, sampling: Sampling) -> Result<(Matrix<T>, ApproxRecord)> {
    let blocks = MatrixBlocks::partition(w, rank, sampling)?;
    let w_hat = nystrom_approximate(&blocks, core)?;
    let err = approximation_error(w, &w_hat)?;
    let (m, n) = w.shape();
    let flops = |method| u64::try_from(flop_estimate(m, n, rank, method)).unwrap_or(u64::MAX);
    let record = ApproxRecord {
        abs_err: err.absolute,
        rel_err: err.relative,
        flops_nystrom: flops(FlopMethod::Nystrom),
        flops_svd: flops(FlopMethod::FullSvd),
    };
    Ok((w_hat, record))
}

pub fn approx(args: ApproxArgs) -> Result<()> {
    let mut s = settings_for(&args.common)?;
    s.fixed("input", &args.input);
    s.fixed("output", &args.output);
    let rank = s.get("rank", args.rank, 8usize)?;
    let core = s.get("core", args.core, NloraCore::Pseudoinverse)?;
    let sampling = s.get("sampling", args.sampling, SamplingArg::Leading)?;
    let rank_tol = s.get("rank_tol", args.rank_tol, DEFAULT_RANK_TOL)?;
    let seed = s.get("seed", args.common.seed, 0u64)?;
    s.finish()?;
    let manifest = args.common.manifest.clone().unwrap_or_else(|| manifest_beside(&args.output));
    write_manifest("approx", &s, Some(&manifest))?;

    if rank_tol.is_nan() || rank_tol < 0.0 {
        bail!("rank_tol must be >= 0");
    }
    let sampling = match sampling {
        SamplingArg::Leading => Sampling::Leading,
        SamplingArg::Random => Sampling::Random { seed },
    };
    let input = io::load_any(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let (w_hat, record) = match &input {
        AnyMatrix::F32(w) => {
            let core = match core {
                NloraCore::Pseudoinverse => Core::Pseudoinverse { rank_tol: rank_tol as f32 },
                NloraCore::RawSample => Core::RawSample,
            };
            let (w_hat, rec) = approx_typed(w, rank, core, sampling)?;
            (AnyMatrix::F32(w_hat), rec)
        }
        AnyMatrix::F64(w) => {
            let core = match core {
                NloraCore::Pseudoinverse => Core::Pseudoinverse { rank_tol },
                NloraCore::RawSample => Core::RawSample,
            };
            let (w_hat, rec) = approx_typed(w, rank, core, sampling)?;
            (AnyMatrix::F64(w_hat), rec)
        }
    };
    io::save_any(&args.output, &w_hat).with_context(|| format!("writing {}", args.output.display()))?;
    print_json(&record)
}

#[derive(Serialize)]
struct InitRecord {
    variant: Variant,
    rank: usize,
    m: usize,
    n: usize,
    precision: Precision,
    trainable: usize,
    adapter_params: usize,
    checkpoint: PathBuf,
}

fn init_typed<T: Scalar>(base: Matrix<T>, cfg: &AdapterConfig, seed: u64, out: &Path) -> Result<InitRecord> {
    let (m, n) = base.shape();
    let adapter = Adapter::init(base, cfg, seed)?;
    let adapter_params = m * cfg.rank + cfg.rank * n + if cfg.variant.has_intermediate() { cfg.rank * cfg.rank } else { 0 };
    let record = InitRecord {
        variant: cfg.variant,
        rank: cfg.rank,
        m,
        n,
        precision: Precision::from_code(T::PRECISION_CODE).expect("scalar precision"),
        trainable: adapter.trainable_param_count(),
        adapter_params,
        checkpoint: out.to_path_buf(),
    };
    Checkpoint::from_adapters(&[("weight".to_string(), adapter)], seed)?
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(record)
}

pub fn init(args: InitArgs) -> Result<()> {
    let mut s = settings_for(&args.common)?;
    s.fixed("input", &args.input);
    s.fixed("output", &args.output);
    let cfg = adapter_config(&mut s, &args.adapter, Variant::Nlora)?;
    let seed = s.get("seed", args.common.seed, 0u64)?;
    s.finish()?;
    let manifest = args.common.manifest.clone().unwrap_or_else(|| manifest_beside(&args.output));
    write_manifest("init", &s, Some(&manifest))?;

    let base = io::load_any(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let record = match base {
        AnyMatrix::F32(w) => init_typed(w, &cfg, seed, &args.output)?,
        AnyMatrix::F64(w) => init_typed(w, &cfg, seed, &args.output)?,
    };
    print_json(&record)
}

#[derive(Serialize)]
struct TrainRecord {
    task: &'static str,
    variant: Variant,
    rank: usize,
    steps: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    diverged: Option<String>,
    metrics: PathBuf,
    checkpoint: PathBuf,
}

fn train_typed<T: Scalar>(task: &Task, ad: &AdapterConfig, cfg: &TrainConfig, out: &Path) -> Result<()> {
    let report = run_task::<T>(task, ad, cfg)?;
    let metrics = out.join("metrics.csv");
    let checkpoint = out.join("checkpoint.nlrc");
    report.state.log.write_csv(&metrics)?;
    report.initial_checkpoint(cfg.seed)?.save(out.join("checkpoint_init.nlrc"))?;
    report.checkpoint(cfg.seed)?.save(&checkpoint)?;
    let log = &report.state.log;
    print_json(&TrainRecord {
        task: task.name(),
        variant: ad.variant,
        rank: ad.rank,
        steps: report.state.step,
        initial_loss: log.first_loss(),
        final_loss: log.last_loss(),
        diverged: report.diverged.as_ref().map(|d| format!("step {}: {}", d.step, d.reason)),
        metrics,
        checkpoint,
    })?;
    if let Some(d) = report.diverged {
        return Err(NumericFailure(format!("training diverged at step {} ({})", d.step, d.reason)).into());
    }
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut s = settings_for(&args.common)?;
    let kind = s.get("task", args.task, TaskKind::MatrixRecovery)?;
    let ad = adapter_config(&mut s, &args.adapter, Variant::Nlora)?;
    let task = match kind {
        TaskKind::MatrixRecovery => {
            let d = MatrixRecovery::default();
            Task::MatrixRecovery(MatrixRecovery {
                m: s.get("m", args.m, d.m)?,
                n: s.get("n", args.n, d.n)?,
                k: s.get("k", args.k, d.k)?,
                base_std: s.get("base_std", args.base_std, d.base_std)?,
                perturbation_std: s.get("perturbation_std", args.perturbation_std, d.perturbation_std)?,
                probe_rows: d.probe_rows,
            })
        }
        TaskKind::StudentMlp => {
            let d = StudentMlp::default();
            if args.base_std.is_some() {
                bail!("--base-std applies to matrix-recovery only");
            }
            Task::StudentMlp(StudentMlp {
                input: s.get("m", args.m, d.input)?,
                hidden: s.get("hidden", args.hidden, d.hidden)?,
                output: s.get("n", args.n, d.output)?,
                k: s.get("k", args.k, d.k)?,
                perturbation_std: s.get("perturbation_std", args.perturbation_std, d.perturbation_std)?,
                probe_rows: d.probe_rows,
            })
        }
    };
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        optimizer: s.get("optimizer", args.optimizer, d.optimizer)?,
        learning_rate: s.get("lr", args.lr, d.learning_rate)?,
        batch_size: s.get("batch_size", args.batch_size, d.batch_size)?,
        warmup_ratio: s.get("warmup_ratio", args.warmup_ratio, d.warmup_ratio)?,
        total_steps: s.get("steps", args.steps, d.total_steps)?,
        weight_decay: s.get("weight_decay", args.weight_decay, d.weight_decay)?,
        seed: s.get("seed", args.common.seed, d.seed)?,
        precision: s.get("precision", args.precision, d.precision)?,
        log_every: s.get("log_every", args.log_every, d.log_every)?,
        record_wall_time: !s.get("no_wall_clock", args.no_wall_clock.then_some(true), false)?,
        ..d
    };
    let sweep: Option<String> = s.optional(
        "sweep_ranks",
        args.sweep_ranks.as_ref().map(|r| r.iter().map(usize::to_string).collect::<Vec<_>>().join(",")),
    )?;
    let out = s.get("out_dir", args.out_dir.clone(), PathBuf::from("nlora-train"))?;
    s.finish()?;
    let manifest = args.common.manifest.clone().unwrap_or_else(|| out.join("manifest.json"));
    write_manifest("train", &s, Some(&manifest))?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    if let Some(list) = sweep {
        let ranks = list
            .split(',')
            .map(|r| r.trim().parse::<usize>().map_err(|e| anyhow!("sweep rank `{r}`: {e}")))
            .collect::<Result<Vec<_>>>()?;
        let entries = match cfg.precision {
            Precision::F32 => rank_sweep::<f32>(&task, &ad, &cfg, &ranks, &out)?,
            Precision::F64 => rank_sweep::<f64>(&task, &ad, &cfg, &ranks, &out)?,
        };
        let text = serde_json::to_string_pretty(&entries)?;
        std::fs::write(out.join("sweep.json"), text + "\n")?;
        return print_json(&entries);
    }
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(&task, &ad, &cfg, &out),
        Precision::F64 => train_typed::<f64>(&task, &ad, &cfg, &out),
    }
}

pub fn params(args: ParamsArgs) -> Result<()> {
    let mut s = settings_for(&args.common)?;
    let layout_spec = s.get("layout", args.layout.clone(), "llama2-7b".to_string())?;
    let variant = s.get("variant", args.variant, Variant::Nlora)?;
    let rank = s.get("rank", args.rank, 8usize)?;
    let mut cfg = AdapterConfig::new(variant, rank);
    cfg.train_mask = s.get("train_mask", args.train_mask, cfg.train_mask)?;
    s.finish()?;
    write_manifest("params", &s, args.common.manifest.as_deref())?;

    cfg.validate()?;
    if rank == 0 {
        bail!("rank must be positive");
    }
    let layout = ModelLayout::load(&layout_spec).with_context(|| format!("loading layout `{layout_spec}`"))?;
    print_json(&json!({
        "layout": layout_spec,
        "sites": layout.len(),
        "variant": variant,
        "rank": rank,
        "train_mask": cfg.train_mask,
        "trainable": trainable_params(&layout, &cfg),
    }))
}

pub fn bench_init(args: BenchArgs) -> Result<()> {
    let mut s = settings_for(&args.common)?;
    let m = s.get("m", args.m, 2048usize)?;
    let n = s.get("n", args.n, m)?;
    let rank = s.get("rank", args.rank, 16usize)?;
    let reps = s.get("reps", args.reps, 5usize)?;
    let seed = s.get("seed", args.common.seed, 0u64)?;
    s.finish()?;
    write_manifest("bench-init", &s, args.common.manifest.as_deref())?;
    print_json(&nlora_core::bench::bench_init(m, n, rank, reps, seed)?)
}
