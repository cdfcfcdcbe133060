//! Free-text versus classification-head evaluation and report tables.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eci::{predict, EciHead};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{GenerateOptions, LanguageModel};
use crate::prompts::{self, extract_answer, BenchmarkRecord, Extraction, PromptStyle, EOS};
use crate::train::prompt_batch;
use crate::autograd::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Freetext,
    Eci,
    Both,
}

impl EvalMode {
    pub fn freetext(self) -> bool {
        matches!(self, EvalMode::Freetext | EvalMode::Both)
    }

    pub fn eci(self) -> bool {
        matches!(self, EvalMode::Eci | EvalMode::Both)
    }
}

impl core::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freetext" => Ok(EvalMode::Freetext),
            "eci" => Ok(EvalMode::Eci),
            "both" => Ok(EvalMode::Both),
            other => Err(Error::InvalidArgument(format!("unknown eval mode `{other}`"))),
        }
    }
}

/// What a backend produced for one record.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ItemOutput {
    pub response: Option<String>,
    pub eci_label: Option<String>,
}

/// A model that can answer benchmark records.
pub trait EvalBackend: Sync {
    fn class_names(&self) -> &[String];
    fn run(&self, record: &BenchmarkRecord, mode: EvalMode) -> Result<ItemOutput>;
}

/// A fine-tuned decoder and head.
pub struct TrainedBackend<M> {
    pub model: M,
    pub head: EciHead,
    pub style: PromptStyle,
    pub max_new_tokens: usize,
}

impl<M: LanguageModel> TrainedBackend<M> {
    /// Prompt ids, left-truncated to leave room for generation.
    pub fn prompt_ids(&self, record: &BenchmarkRecord) -> Result<Vec<usize>> {
        let max = self.model.config().max_seq_len;
        if self.max_new_tokens >= max {
            return Err(Error::Config(format!(
                "max_new_tokens {} leaves no room for a prompt in {max} positions",
                self.max_new_tokens
            )));
        }
        let mut ids = prompts::encode(&prompts::build_prompt(record, self.style));
        let room = max - self.max_new_tokens;
        if ids.len() > room {
            ids.drain(..ids.len() - room);
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument(format!("record `{}` has an empty prompt", record.id)));
        }
        Ok(ids)
    }
}

impl<M: LanguageModel + Sync> EvalBackend for TrainedBackend<M> {
    fn class_names(&self) -> &[String] {
        &self.head.config().class_names
    }

    fn run(&self, record: &BenchmarkRecord, mode: EvalMode) -> Result<ItemOutput> {
        let prompt = self.prompt_ids(record)?;
        let cfg = self.model.config();
        let opts = GenerateOptions {
            max_new_tokens: self.max_new_tokens,
            eos: Some(EOS),
        };
        let mut out = ItemOutput::default();
        let mut first_logits = None;
        if mode.eci() {
            // One forward feeds the head and, in "both" mode, the first
            // generated token.
            let (ids, lens) = prompt_batch(&[&prompt], cfg.max_seq_len)?;
            let mut g = Graph::new();
            let mut bound = self.model.bind(&mut g, false)?;
            self.head.bind(&mut g, &mut bound, false)?;
            let fw = self.model.forward_graph(&mut g, &bound, &ids)?;
            let logits = self.head.forward_graph(&mut g, &bound, fw.hidden, Some(&lens))?;
            let class = predict(g.value(logits))[0];
            out.eci_label = Some(self.head.config().class_names[class].clone());
            let v = cfg.vocab_size;
            let l = prompt.len();
            first_logits = Some(g.value(fw.logits).data()[(l - 1) * v..l * v].to_vec());
        }
        if mode.freetext() {
            let seq = self.model.generate_from(&prompt, opts, first_logits.as_deref())?;
            out.response = Some(prompts::decode(&seq[prompt.len()..])?);
        }
        Ok(out)
    }
}

/// How a scripted backend picks its head label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubEci {
    Gold,
    Random { seed: u64 },
    Fixed { label: String },
}

/// Canned responses keyed by record id; the stand-in model for harness tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedStub {
    pub class_names: Vec<String>,
    pub responses: BTreeMap<String, String>,
    /// Used for records without a scripted response.
    pub default_response: String,
    pub eci: StubEci,
    /// Gold labels by record id, for [`StubEci::Gold`].
    #[serde(default)]
    pub gold: BTreeMap<String, String>,
}

pub const REFUSAL_RESPONSE: &str = "I am unable to help with this question without more information.";

fn hedging_response(labels: &[String]) -> String {
    let mut s = String::from("Several options look plausible here:\n");
    for l in labels.iter().take(2) {
        s.push_str(l);
        s.push('\n');
    }
    s.push_str("Further study would be needed to decide.");
    s
}

impl ScriptedStub {
    /// Answers every record with its gold label verbatim, except a seeded
    /// `floor(fraction · n)` of them, which get a refusal or a hedge that
    /// names two labels on their own lines.
    pub fn scripted(records: &[BenchmarkRecord], class_names: Vec<String>, fraction: f64, seed: u64, eci: StubEci) -> Self {
        let n = records.len();
        let k = libm::floor(fraction * n as f64) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..n {
            let j = rng.random_range(i..n);
            order.swap(i, j);
        }
        let mut responses = BTreeMap::new();
        let mut gold = BTreeMap::new();
        for (rank, &i) in order.iter().enumerate() {
            let r = &records[i];
            let text = if rank < k {
                if rank % 2 == 0 {
                    REFUSAL_RESPONSE.to_string()
                } else {
                    hedging_response(&class_names)
                }
            } else {
                r.gold.clone()
            };
            responses.insert(r.id.clone(), text);
            gold.insert(r.id.clone(), r.gold.clone());
        }
        Self {
            class_names,
            responses,
            default_response: REFUSAL_RESPONSE.to_string(),
            eci,
            gold,
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

impl EvalBackend for ScriptedStub {
    fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn run(&self, record: &BenchmarkRecord, mode: EvalMode) -> Result<ItemOutput> {
        let mut out = ItemOutput::default();
        if mode.freetext() {
            out.response = Some(
                self.responses
                    .get(&record.id)
                    .cloned()
                    .unwrap_or_else(|| self.default_response.clone()),
            );
        }
        if mode.eci() {
            let label = match &self.eci {
                StubEci::Gold => self.gold.get(&record.id).cloned().unwrap_or_else(|| record.gold.clone()),
                StubEci::Fixed { label } => label.clone(),
                StubEci::Random { seed } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&record.id));
                    let logits: Vec<f64> = (0..self.class_names.len()).map(|_| rng.random::<f64>()).collect();
                    self.class_names[crate::tensor::argmax(&logits)].clone()
                }
            };
            out.eci_label = Some(label);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreetextOutcome {
    pub response: String,
    pub extraction: Extraction,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EciOutcome {
    pub label: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub id: String,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freetext: Option<FreetextOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eci: Option<EciOutcome>,
}

/// Every gold label and option label must be a class the backend knows.
pub fn check_class_set(class_names: &[String], records: &[BenchmarkRecord]) -> Result<()> {
    for r in records {
        for label in core::iter::once(r.gold.as_str()).chain(r.options.labels()) {
            if !class_names.iter().any(|c| c == label) {
                return Err(Error::ClassMismatch {
                    record: r.id.clone(),
                    label: label.to_string(),
                });
            }
        }
    }
    Ok(())
}

pub fn evaluate_record<B: EvalBackend + ?Sized>(backend: &B, record: &BenchmarkRecord, mode: EvalMode) -> Result<RecordOutcome> {
    let out = backend.run(record, mode)?;
    let labels: Vec<String> = record.options.labels().map(ToString::to_string).collect();
    let freetext = out.response.map(|response| {
        let extraction = extract_answer(&response, &labels);
        let correct = extraction.label().is_some_and(|l| l.eq_ignore_ascii_case(&record.gold));
        FreetextOutcome {
            response,
            extraction,
            correct,
        }
    });
    let eci = out.eci_label.map(|label| EciOutcome {
        correct: label.eq_ignore_ascii_case(&record.gold),
        label,
    });
    Ok(RecordOutcome {
        id: record.id.clone(),
        gold: record.gold.clone(),
        freetext,
        eci,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: String,
    pub accuracy: f64,
    pub parse_failure_rate: f64,
    pub n_items: usize,
    pub correct: usize,
    pub parse_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub bleu4: f64,
    pub rouge1: f64,
    pub pairs: usize,
}

/// The configuration columns of a report row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub method: String,
    pub model_size: String,
    pub quantization: bool,
    pub fine_tuned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: String,
    pub rows: Vec<ModeRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricBlock>,
    pub config: ConfigEcho,
    pub metadata: BTreeMap<String, String>,
    pub outcomes: Vec<RecordOutcome>,
}

impl EvalReport {
    pub fn row(&self, mode: &str) -> Option<&ModeRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

fn mode_row<'a, I>(mode: &str, outcomes: I) -> ModeRow
where
    I: Iterator<Item = (bool, bool)> + 'a,
{
    let (mut n, mut correct, mut failures) = (0, 0, 0);
    for (ok, failed) in outcomes {
        n += 1;
        correct += ok as usize;
        failures += failed as usize;
    }
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    ModeRow {
        mode: mode.to_string(),
        accuracy: frac(correct),
        parse_failure_rate: frac(failures),
        n_items: n,
        correct,
        parse_failures: failures,
    }
}

/// Assembles a report from outcomes listed in record order.
pub fn build_report(
    benchmark: &str,
    records: &[BenchmarkRecord],
    outcomes: Vec<RecordOutcome>,
    config: ConfigEcho,
) -> Result<EvalReport> {
    if records.len() != outcomes.len() {
        return Err(Error::LengthMismatch(records.len(), outcomes.len()));
    }
    let mut rows = Vec::new();
    if outcomes.iter().any(|o| o.freetext.is_some()) {
        rows.push(mode_row(
            "freetext",
            outcomes
                .iter()
                .filter_map(|o| o.freetext.as_ref())
                .map(|f| (f.correct, f.extraction.label().is_none())),
        ));
    }
    if outcomes.iter().any(|o| o.eci.is_some()) {
        rows.push(mode_row(
            "eci",
            outcomes.iter().filter_map(|o| o.eci.as_ref()).map(|e| (e.correct, false)),
        ));
    }
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for (r, o) in records.iter().zip(&outcomes) {
        if let (Some(reference), Some(f)) = (&r.reference, &o.freetext) {
            cands.push(f.response.as_str());
            refs.push(reference.as_str());
        }
    }
    let metrics = if cands.iter().any(|c| !metrics::tokenize(c).is_empty()) {
        let m = metrics::score_texts(&cands, &refs, 4, 1)?;
        Some(MetricBlock {
            bleu4: m.bleu,
            rouge1: m.rouge_recall,
            pairs: m.pairs,
        })
    } else {
        None
    };
    let mut metadata = BTreeMap::new();
    metadata.insert("metric_scope".into(), "full_continuation".into());
    metadata.insert("bleu".into(), "corpus, 4-gram, smoothed".into());
    Ok(EvalReport {
        benchmark: benchmark.to_string(),
        rows,
        metrics,
        config,
        metadata,
        outcomes,
    })
}

/// Sequential evaluation; see the CLI crate for a parallel driver.
pub fn evaluate<B: EvalBackend + ?Sized>(
    backend: &B,
    benchmark: &str,
    records: &[BenchmarkRecord],
    mode: EvalMode,
    config: ConfigEcho,
) -> Result<EvalReport> {
    check_class_set(backend.class_names(), records)?;
    let outcomes = records
        .iter()
        .map(|r| evaluate_record(backend, r, mode))
        .collect::<Result<Vec<_>>>()?;
    build_report(benchmark, records, outcomes, config)
}

pub const MISSING: &str = "-";

/// Header and cells of the comparison table.
pub fn table_rows(reports: &[EvalReport]) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let first = reports.first().ok_or(Error::Empty)?;
    for r in reports {
        if r.benchmark != first.benchmark {
            return Err(Error::ConflictingColumns(first.benchmark.clone(), r.benchmark.clone()));
        }
    }
    let header: Vec<String> = [
        "Methods",
        "Size",
        "Quantization",
        "Fine-tuning",
        "BLEU-4",
        "ROUGE-1",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain(core::iter::once(format!("Accuracy ({})", first.benchmark)))
    .collect();
    let pct = |v: f64| format!("{:.2}", v * 100.0);
    let mut rows = Vec::new();
    for r in reports {
        for row in &r.rows {
            let text_metrics = r.metrics.as_ref().filter(|_| row.mode == "freetext");
            let method = match row.mode.as_str() {
                "eci" => format!("{} + ECI", r.config.method),
                _ => r.config.method.clone(),
            };
            rows.push(alloc::vec![
                method,
                r.config.model_size.clone(),
                if r.config.quantization { "4 bit".into() } else { "none".into() },
                if r.config.fine_tuned { "yes".into() } else { "no".into() },
                text_metrics.map(|m| pct(m.bleu4)).unwrap_or_else(|| MISSING.into()),
                text_metrics.map(|m| pct(m.rouge1)).unwrap_or_else(|| MISSING.into()),
                pct(row.accuracy),
            ]);
        }
    }
    Ok((header, rows))
}

pub fn render_markdown(reports: &[EvalReport]) -> Result<String> {
    let (header, rows) = table_rows(reports)?;
    let mut out = format!("| {} |\n", header.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in rows {
        out.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    Ok(out)
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(reports: &[EvalReport]) -> Result<String> {
    let (header, rows) = table_rows(reports)?;
    let mut out = String::new();
    for r in core::iter::once(header).chain(rows) {
        let cells: Vec<String> = r.iter().map(|c| csv_cell(c)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Human-readable parameter count, e.g. `"1.23M"`.
pub fn format_size(params: usize) -> String {
    if params >= 1_000_000_000 {
        format!("{:.1}B", params as f64 / 1e9)
    } else if params >= 1_000_000 {
        format!("{:.2}M", params as f64 / 1e6)
    } else if params >= 1_000 {
        format!("{:.1}K", params as f64 / 1e3)
    } else {
        format!("{params}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ynm() -> Vec<String> {
        vec!["yes".into(), "no".into(), "maybe".into()]
    }

    fn echo() -> ConfigEcho {
        ConfigEcho {
            method: "stub".into(),
            model_size: "0".into(),
            quantization: false,
            fine_tuned: true,
        }
    }

    #[test]
    fn gold_stub_is_perfect() {
        let recs = prompts::synthetic_records(20, &["yes", "no", "maybe"], 1);
        let stub = ScriptedStub::scripted(&recs, ynm(), 0.0, 0, StubEci::Gold);
        let rep = evaluate(&stub, "PubMedQA", &recs, EvalMode::Both, echo()).unwrap();
        let ft = rep.row("freetext").unwrap();
        assert_eq!((ft.accuracy, ft.parse_failure_rate), (1.0, 0.0));
        assert_eq!(rep.row("eci").unwrap().accuracy, 1.0);
    }

    #[test]
    fn scripted_failures_are_exact() {
        let recs = prompts::synthetic_records(50, &["yes", "no", "maybe"], 2);
        let stub = ScriptedStub::scripted(&recs, ynm(), 0.3, 5, StubEci::Gold);
        let rep = evaluate(&stub, "PubMedQA", &recs, EvalMode::Both, echo()).unwrap();
        assert_eq!(rep.row("freetext").unwrap().parse_failures, 15);
        assert_eq!(rep.row("eci").unwrap().parse_failure_rate, 0.0);
    }

    #[test]
    fn class_mismatch() {
        let recs = prompts::synthetic_records(3, &["A", "B"], 2);
        let stub = ScriptedStub::scripted(&recs, ynm(), 0.0, 5, StubEci::Gold);
        assert!(matches!(
            evaluate(&stub, "x", &recs, EvalMode::Eci, echo()),
            Err(Error::ClassMismatch { .. })
        ));
    }

    #[test]
    fn tables() {
        let recs = prompts::synthetic_records(6, &["yes", "no", "maybe"], 2);
        let stub = ScriptedStub::scripted(&recs, ynm(), 0.5, 5, StubEci::Gold);
        let rep = evaluate(&stub, "PubMedQA", &recs, EvalMode::Both, echo()).unwrap();
        let md = render_markdown(core::slice::from_ref(&rep)).unwrap();
        assert!(md.starts_with(
            "| Methods | Size | Quantization | Fine-tuning | BLEU-4 | ROUGE-1 | Accuracy (PubMedQA) |"
        ));
        assert_eq!(md.lines().count(), 4);
        assert!(md.contains(MISSING));
        let mut other = rep.clone();
        other.benchmark = "USMLE".into();
        assert!(matches!(render_csv(&[rep, other]), Err(Error::ConflictingColumns(..))));
    }
}
