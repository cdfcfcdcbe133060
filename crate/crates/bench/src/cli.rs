//! Argument definitions and subcommand bodies.
//!
//! Exit codes: 0 success, 1 runtime failure (including a failing gradient
//! check), 2 invalid arguments or config, 3 data errors, 4 training diverged.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use ecibench_core::eval::{render_csv, render_markdown, EvalMode, EvalReport, ScriptedStub, StubEci};
use ecibench_core::gradcheck::{run_cases, DEFAULT_EPS, TOLERANCE};
use ecibench_core::gradsuite::{format_row, registry, SHAPES_PER_CASE};
use ecibench_core::metrics::score_texts;
use ecibench_core::prompts::class_names;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SEED_ENV};
use crate::data::load_benchmark;
use crate::run::{eval_checkpoint, train_from_config, RunError};

#[derive(Debug, Parser)]
#[command(name = "ecibench", version, about = "Fine-tune, evaluate and report on multiple-choice benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train adapters and the classification head from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps (counted from step 0).
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Evaluate a checkpoint on a JSONL benchmark.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "both")]
        mode: EvalMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every registered differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// BLEU and ROUGE over line-aligned candidate and reference files.
    Metrics {
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 4)]
        bleu_n: usize,
        #[arg(long, default_value_t = 1)]
        rouge_n: usize,
    },
    /// Render evaluation reports as one comparison table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        md: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a scripted checkpoint with canned responses for a benchmark.
    Stub {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Share of items answered with a refusal or a hedge.
        #[arg(long, default_value_t = 0.0)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `gold`, `random` or `fixed:LABEL`.
        #[arg(long, default_value = "gold")]
        eci: String,
    },
}

/// A failed command: message for stderr plus its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Self::new(e.exit_code(), e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn seed_override() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn write_file(path: &Path, contents: &str) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(3, format!("{}: {e}", path.display())))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Outcome {
    match cli.command {
        Command::Train {
            config,
            resume,
            stop_at,
        } => train(&config, resume.as_deref(), stop_at, out),
        Command::Eval { ckpt, data, mode, out: path } => {
            let report = eval_checkpoint(&ckpt, &data, mode)?;
            for row in &report.rows {
                let _ = writeln!(
                    out,
                    "{:<8} accuracy {:.4}  parse failures {:.4}  ({} items)",
                    row.mode, row.accuracy, row.parse_failure_rate, row.n_items
                );
            }
            let json = serde_json::to_string_pretty(&report).expect("reports serialize");
            write_file(&path, &json)
        }
        Command::Gradcheck { seed } => gradcheck(seed, out),
        Command::Metrics {
            candidate,
            reference,
            bleu_n,
            rouge_n,
        } => metrics(&candidate, &reference, bleu_n, rouge_n, out),
        Command::Report { reports, md, csv } => report(&reports, md.as_deref(), csv.as_deref(), out),
        Command::Stub {
            data,
            out: path,
            fraction,
            seed,
            eci,
        } => stub(&data, &path, fraction, seed, &eci),
    }
}

fn train(config: &Path, resume: Option<&Path>, stop_at: Option<usize>, out: &mut dyn Write) -> Outcome {
    let mut cfg = RunConfig::load(config).map_err(|e| Failure::new(2, e.to_string()))?;
    cfg.apply_seed_override(seed_override().as_deref())
        .map_err(|e| Failure::new(2, e.to_string()))?;
    if stop_at == Some(0) {
        return Err(Failure::new(2, "--stop-at must be positive"));
    }
    let summary = train_from_config(&cfg, resume, stop_at, out)?;
    let _ = writeln!(
        out,
        "wrote {} ({} steps recorded)",
        summary.checkpoint.display(),
        summary.records.len()
    );
    Ok(())
}

fn gradcheck(seed: u64, out: &mut dyn Write) -> Outcome {
    let seed = match seed_override() {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::new(2, format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
        None => seed,
    };
    let start = Instant::now();
    let rows = run_cases(&registry(seed), DEFAULT_EPS, TOLERANCE).map_err(|e| Failure::new(1, e.to_string()))?;
    for r in &rows {
        let _ = writeln!(out, "{}", format_row(r));
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let _ = writeln!(
        out,
        "{} ops x {SHAPES_PER_CASE} shapes, {} failed, {:.2}s",
        rows.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(1, format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn metrics(candidate: &Path, reference: &Path, bleu_n: usize, rouge_n: usize, out: &mut dyn Write) -> Outcome {
    let cands = read_file(candidate)?;
    let refs = read_file(reference)?;
    let cands: Vec<&str> = cands.lines().collect();
    let refs: Vec<&str> = refs.lines().collect();
    let report = score_texts(&cands, &refs, bleu_n, rouge_n).map_err(|e| Failure::new(3, e.to_string()))?;
    let json = serde_json::to_string_pretty(&report).expect("reports serialize");
    let _ = writeln!(out, "{json}");
    Ok(())
}

fn report(paths: &[PathBuf], md: Option<&Path>, csv: Option<&Path>, out: &mut dyn Write) -> Outcome {
    let mut reports: Vec<EvalReport> = Vec::new();
    for p in paths {
        let text = read_file(p)?;
        let r = serde_json::from_str(&text).map_err(|e| Failure::new(3, format!("{}: {e}", p.display())))?;
        reports.push(r);
    }
    let table = |e: ecibench_core::Error| Failure::new(3, e.to_string());
    let markdown = render_markdown(&reports).map_err(table)?;
    let csv_text = render_csv(&reports).map_err(table)?;
    match md {
        Some(path) => write_file(path, &markdown)?,
        None => {
            let _ = write!(out, "{markdown}");
        }
    }
    if let Some(path) = csv {
        write_file(path, &csv_text)?;
    }
    Ok(())
}

fn parse_stub_eci(spec: &str, seed: u64) -> Result<StubEci, Failure> {
    match spec {
        "gold" => Ok(StubEci::Gold),
        "random" => Ok(StubEci::Random { seed }),
        _ => match spec.strip_prefix("fixed:") {
            Some(label) if !label.is_empty() => Ok(StubEci::Fixed { label: label.into() }),
            _ => Err(Failure::new(2, format!("--eci expects gold, random or fixed:LABEL, got {spec:?}"))),
        },
    }
}

fn stub(data: &Path, path: &Path, fraction: f64, seed: u64, eci: &str) -> Outcome {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Failure::new(2, format!("--fraction {fraction} is outside [0, 1]")));
    }
    let eci = parse_stub_eci(eci, seed)?;
    let loaded = load_benchmark(data).map_err(|e| Failure::new(3, e.to_string()))?;
    let classes = class_names(&loaded.records);
    let stub = ScriptedStub::scripted(&loaded.records, classes, fraction, seed, eci);
    Checkpoint::from_stub(stub)
        .save(path)
        .map_err(|e| Failure::new(1, e.to_string()))
}
