//! End-to-end pipelines behind the `train` and `eval` subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ecibench_core::eci::EciHead;
use ecibench_core::eval::{self, build_report, check_class_set, ConfigEcho, EvalBackend, EvalMode, EvalReport};
use ecibench_core::lora::inject_lora;
use ecibench_core::params::ParamReport;
use ecibench_core::prompts::{class_names, BenchmarkRecord};
use ecibench_core::quant::MemoryReport;
use ecibench_core::train::{examples_from_records, pretrain, PretrainConfig, StepRecord, TrainExample, Trainer, CSV_HEADER};
use ecibench_core::Model;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, CheckpointError, EvalSettings, LoadedBackend};
use crate::config::{ConfigError, RunConfig};
use crate::data::{load_benchmark, DataError};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("data: {0}")]
    DataContent(String),
    #[error("training diverged: non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Core(ecibench_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<ecibench_core::Error> for RunError {
    fn from(e: ecibench_core::Error) -> Self {
        match e {
            ecibench_core::Error::NonFiniteLoss { step } => RunError::NonFinite { step },
            other => RunError::Core(other),
        }
    }
}

impl RunError {
    /// Process exit status: 2 for configuration, 3 for data, 4 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Data(_) | RunError::DataContent(_) => 3,
            RunError::NonFinite { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = RunError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A trainer ready for step 0 and the examples it trains on.
pub struct Prepared {
    pub trainer: Trainer,
    pub examples: Vec<TrainExample>,
    pub memory: Option<MemoryReport>,
    pub pretrain_losses: Vec<f64>,
}

/// Builds every component from the config and the loaded training records.
///
/// Seeds: base init `seed`, adapters `seed + 1`, head `seed + 2`, warm-up
/// batches `seed + 3`; batch order uses `seed` itself.
pub fn prepare(cfg: &RunConfig, records: &[BenchmarkRecord]) -> Result<Prepared> {
    if records.is_empty() {
        return Err(RunError::DataContent("the training set is empty".into()));
    }
    let classes = class_names(records);
    if classes.len() < 2 {
        return Err(RunError::DataContent(format!("need at least two classes, found {classes:?}")));
    }
    let max_len = cfg.model.max_seq_len;
    let examples = examples_from_records(records, &classes, cfg.prompt.style, max_len)
        .map_err(|e| RunError::DataContent(e.to_string()))?;

    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    let mut pretrain_losses = Vec::new();
    if let Some(p) = cfg.pretrain {
        let sequences: Vec<Vec<usize>> = examples
            .iter()
            .map(|e| {
                let mut s = e.prompt.clone();
                s.extend_from_slice(&e.completion);
                s.truncate(max_len);
                s
            })
            .collect();
        pretrain_losses = pretrain(
            &mut model,
            &sequences,
            PretrainConfig {
                steps: p.steps,
                lr: p.lr,
                batch_size: p.batch_size,
                seed: cfg.seed.wrapping_add(3),
            },
        )?;
    }
    let memory = match cfg.quantization {
        Some(q) => Some(model.quantize(q)?),
        None => None,
    };
    let lora = inject_lora(model, cfg.lora.clone(), cfg.seed.wrapping_add(1))?;
    let head = EciHead::init(cfg.eci.head_config(classes, &cfg.model), cfg.seed.wrapping_add(2))?;
    let trainer = Trainer::new(lora, head, cfg.training.train_config(cfg.seed))?;
    Ok(Prepared {
        trainer,
        examples,
        memory,
        pretrain_losses,
    })
}

pub fn format_param_report(r: &ParamReport) -> String {
    let mut out = format!("trainable {} / frozen {} / total {}\n", r.trainable_count, r.frozen_count, r.total());
    for g in &r.groups {
        out.push_str(&format!("  {:<6} trainable {:>10}  frozen {:>10}\n", g.name, g.trainable, g.frozen));
    }
    out
}

pub fn settings(cfg: &RunConfig) -> EvalSettings {
    EvalSettings {
        prompt_style: cfg.prompt.style,
        max_new_tokens: cfg.prompt.max_new_tokens,
    }
}

pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub final_accuracy: f64,
    pub params: ParamReport,
    pub checkpoint: PathBuf,
}

/// Loads data, trains to completion, writes the loss CSV and the checkpoint.
///
/// With `resume`, the trainer is restored from that checkpoint and the CSV
/// keeps its rows for the steps already taken. `stop_at` ends the run early
/// (at that absolute step) and still writes both outputs.
pub fn train_from_config(
    cfg: &RunConfig,
    resume: Option<&Path>,
    stop_at: Option<usize>,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    let loaded = load_benchmark(&cfg.data.train)?;
    if loaded.dropped_images > 0 {
        let _ = writeln!(log, "dropped {} image questions", loaded.dropped_images);
    }
    let mut prepared = prepare(cfg, &loaded.records)?;
    let mut previous = Vec::new();
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        let restored = ck.to_trainer()?;
        if restored.head.config().class_names != prepared.trainer.head.config().class_names {
            return Err(RunError::DataContent("checkpoint classes differ from the training data".into()));
        }
        previous = read_losses(&cfg.output.losses_csv, restored.step)?;
        prepared.trainer = restored;
    }
    let mut trainer = prepared.trainer;
    let params = trainer.model.trainable_parameter_report(Some(&trainer.head));
    let _ = write!(log, "{}", format_param_report(&params));
    if let Some(m) = prepared.memory {
        let _ = writeln!(
            log,
            "nf4: {} tensors, {} elements, storage ratio {:.6}",
            m.quantized_tensors,
            m.quantized_elements,
            m.ratio()
        );
    }
    let total = trainer.config.total_steps;
    let every = (total / 10).max(1);
    let new = trainer.run(&prepared.examples, |_, r| {
        if r.step % every == 0 || r.step + 1 == total {
            let _ = writeln!(
                log,
                "step {:>5}  lr {:.3e}  loss {:.6}  textgen {:.6}  eci {:.6}",
                r.step, r.lr, r.loss, r.l_textgen, r.l_eci
            );
        }
        stop_at.is_none_or(|k| r.step + 1 < k)
    })?;
    let final_accuracy = trainer.accuracy(&prepared.examples)?;
    let _ = writeln!(log, "train accuracy (eci) {:.4}", final_accuracy);

    let mut records = previous;
    records.extend(new);
    fs::write(&cfg.output.losses_csv, ecibench_core::train::losses_csv(&records))
        .map_err(io_err(&cfg.output.losses_csv))?;
    Checkpoint::from_trainer(&trainer, settings(cfg), cfg.quantization).save(&cfg.output.checkpoint)?;
    Ok(TrainSummary {
        records,
        final_accuracy,
        params,
        checkpoint: cfg.output.checkpoint.clone(),
    })
}

/// Rows of an existing loss CSV for steps before `upto`.
pub fn read_losses(path: &Path, upto: usize) -> Result<Vec<StepRecord>> {
    if upto == 0 {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(RunError::DataContent(format!("{}: unexpected CSV header", path.display())));
    }
    let bad = |line: &str| RunError::DataContent(format!("{}: bad row `{line}`", path.display()));
    let mut out = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(line));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
        let step: usize = f[0].parse().map_err(|_| bad(line))?;
        if step >= upto {
            break;
        }
        out.push(StepRecord {
            step,
            lr: num(f[1])?,
            loss: num(f[2])?,
            l_textgen: num(f[3])?,
            l_eci: num(f[4])?,
        });
    }
    if out.len() != upto {
        return Err(RunError::DataContent(format!(
            "{}: has {} rows, the checkpoint is at step {upto}",
            path.display(),
            out.len()
        )));
    }
    Ok(out)
}

/// Evaluates records on a worker pool; outcomes are merged in input order.
pub fn evaluate_parallel<B: EvalBackend + ?Sized>(
    backend: &B,
    benchmark: &str,
    records: &[BenchmarkRecord],
    mode: EvalMode,
    config: ConfigEcho,
) -> ecibench_core::Result<EvalReport> {
    check_class_set(backend.class_names(), records)?;
    let outcomes = records
        .par_iter()
        .map(|r| eval::evaluate_record(backend, r, mode))
        .collect::<ecibench_core::Result<Vec<_>>>()?;
    build_report(benchmark, records, outcomes, config)
}

/// Loads a checkpoint and a JSONL benchmark and evaluates them.
pub fn eval_checkpoint(ckpt: &Path, data: &Path, mode: EvalMode) -> Result<EvalReport> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let loaded = load_benchmark(data)?;
    if loaded.records.is_empty() {
        return Err(DataError::Empty {
            path: data.display().to_string(),
        }
        .into());
    }
    let benchmark = data
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "benchmark".into());
    let backend = checkpoint.to_backend()?;
    let mismatch = |e: ecibench_core::Error| match e {
        e @ ecibench_core::Error::ClassMismatch { .. } => RunError::DataContent(e.to_string()),
        other => other.into(),
    };
    let report = match &backend {
        LoadedBackend::Scripted(stub) => {
            let echo = ConfigEcho {
                method: "Scripted stub".into(),
                model_size: eval::MISSING.into(),
                quantization: false,
                fine_tuned: false,
            };
            evaluate_parallel(stub, &benchmark, &loaded.records, mode, echo)
        }
        LoadedBackend::Trained(b) => {
            let total = b.model.base().param_count() + b.model.adapters().numel() + b.head.param_count();
            let echo = ConfigEcho {
                method: "LoRA".into(),
                model_size: eval::format_size(total),
                quantization: checkpoint.metadata.quantization.is_some(),
                fine_tuned: checkpoint.metadata.step > 0,
            };
            evaluate_parallel(b.as_ref(), &benchmark, &loaded.records, mode, echo)
        }
    }
    .map_err(mismatch)?;
    Ok(report)
}
