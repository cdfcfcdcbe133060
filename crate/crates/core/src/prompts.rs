//! Benchmark records, prompt construction, the byte tokenizer and free-text
//! answer extraction.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const PAD: usize = 256;
pub const EOS: usize = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn encode(text: &str) -> Vec<usize> {
    encode_bytes(text.as_bytes())
}

pub fn encode_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Bytes for every non-reserved id; reserved ids are skipped.
pub fn decode_bytes(ids: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => out.push(id as u8),
            PAD | EOS => {}
            _ => return Err(Error::UnknownTokenId(id)),
        }
    }
    Ok(out)
}

pub fn decode(ids: &[usize]) -> Result<String> {
    let bytes = decode_bytes(ids)?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    PubmedqaStyle,
    UsmleStyle,
    Synthetic,
}

/// Label → option text, in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Options(pub Vec<(String, String)>);

impl Options {
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(l, _)| l.as_str())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.iter().any(|(l, _)| l == label)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<L: Into<String>, T: Into<String>> FromIterator<(L, T)> for Options {
    fn from_iter<I: IntoIterator<Item = (L, T)>>(iter: I) -> Self {
        Options(iter.into_iter().map(|(l, t)| (l.into(), t.into())).collect())
    }
}

impl Serialize for Options {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Options {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Options;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of option label to option text")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> core::result::Result<Options, A::Error> {
                let mut out: Vec<(String, String)> = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, String>()? {
                    if out.iter().any(|(l, _)| *l == k) {
                        return Err(serde::de::Error::custom(format!("duplicate option label `{k}`")));
                    }
                    out.push((k, v));
                }
                Ok(Options(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkRecord {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub options: Options,
    pub gold: String,
    #[serde(default)]
    pub has_image: bool,
    pub source: Source,
    /// Free-text reference answer, used for BLEU / ROUGE when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl BenchmarkRecord {
    pub fn validate(&self) -> Result<()> {
        if self.options.is_empty() {
            return Err(Error::NoOptions(self.id.clone()));
        }
        if !self.options.contains(&self.gold) {
            return Err(Error::GoldNotInOptions(self.id.clone()));
        }
        Ok(())
    }

    fn context_text(&self) -> Option<&str> {
        self.context.as_deref().map(str::trim).filter(|c| !c.is_empty())
    }
}

/// Class names over a record set: option labels in first-seen order.
pub fn class_names(records: &[BenchmarkRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in records {
        for l in r.options.labels() {
            if !out.iter().any(|c| c == l) {
                out.push(l.to_string());
            }
        }
    }
    out
}

pub const THREE_STEP_HEADER: &str = "Answer the multiple-choice question below in three steps.\n\
Step 1: State the medical knowledge that is relevant to the question.\n\
Step 2: Use that knowledge to reason about each option.\n\
Step 3: Finish with the label of the single best option.\n";

pub const LABEL_SUFFIX: &str = "Reply with exactly one option label.";
pub const EXEMPLAR_DELIMITER: &str = "### Example";
pub const TARGET_DELIMITER: &str = "### Task";

fn format_option(label: &str, text: &str) -> String {
    if text.trim().is_empty() || text == label {
        format!("({label})")
    } else {
        format!("({label}) {text}")
    }
}

/// Question, optional context and the option list.
fn body(record: &BenchmarkRecord, out: &mut String) {
    out.push_str("Question: ");
    out.push_str(record.question.trim());
    out.push('\n');
    if let Some(ctx) = record.context_text() {
        out.push_str("Context: ");
        out.push_str(ctx);
        out.push('\n');
    }
    out.push_str("Options:\n");
    for (l, t) in &record.options.0 {
        out.push_str(&format_option(l, t));
        out.push('\n');
    }
}

pub fn build_three_step_prompt(record: &BenchmarkRecord) -> String {
    let mut out = String::from(THREE_STEP_HEADER);
    out.push('\n');
    body(record, &mut out);
    out.push_str(LABEL_SUFFIX);
    out.push_str("\nAnswer:");
    out
}

/// The short single-line layout used for desk-scale training.
pub fn build_plain_prompt(record: &BenchmarkRecord) -> String {
    let mut out = format!("Q: {}\n", record.question.trim());
    if let Some(ctx) = record.context_text() {
        out.push_str("C: ");
        out.push_str(ctx);
        out.push('\n');
    }
    let opts: Vec<String> = record.options.0.iter().map(|(l, t)| format_option(l, t)).collect();
    out.push_str(&opts.join(" "));
    out.push_str("\nA:");
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    Plain,
    #[default]
    ThreeStep,
}

pub fn build_prompt(record: &BenchmarkRecord, style: PromptStyle) -> String {
    match style {
        PromptStyle::Plain => build_plain_prompt(record),
        PromptStyle::ThreeStep => build_three_step_prompt(record),
    }
}

/// The closing sentence of every worked solution.
pub fn answer_sentence(label: &str) -> String {
    format!("The answer is {label}.")
}

/// The text a model is trained to continue a prompt with.
pub fn completion(record: &BenchmarkRecord, style: PromptStyle) -> String {
    match style {
        PromptStyle::Plain => format!(" {}", record.gold),
        PromptStyle::ThreeStep => format!(" {}", worked_solution(record)),
    }
}

/// Three numbered steps ending in [`answer_sentence`].
pub fn worked_solution(record: &BenchmarkRecord) -> String {
    let knowledge = record
        .reference
        .as_deref()
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(ToString::to_string)
        .unwrap_or_else(|| format!("The question asks: {}", record.question.trim()));
    let gold_text = record
        .options
        .0
        .iter()
        .find(|(l, _)| *l == record.gold)
        .map(|(l, t)| format_option(l, t))
        .unwrap_or_default();
    format!(
        "Step 1: {knowledge}\nStep 2: Of the options, {gold_text} is the one consistent with this.\nStep 3: {}",
        answer_sentence(&record.gold)
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub record: BenchmarkRecord,
    pub solution: String,
}

impl Exemplar {
    pub fn from_record(record: BenchmarkRecord) -> Self {
        let solution = worked_solution(&record);
        Self { record, solution }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub style: PromptStyle,
    pub shots: usize,
    pub pool: Vec<Exemplar>,
    pub seed: u64,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Prepends `template.shots` worked exemplars to the target prompt.
///
/// Exemplars are drawn without replacement from the pool minus the target
/// itself, with a generator seeded by the template seed and the target id.
pub fn build_shots(template: &PromptTemplate, record: &BenchmarkRecord) -> Result<String> {
    let target = build_prompt(record, template.style);
    if template.shots == 0 {
        return Ok(target);
    }
    let mut pool: Vec<&Exemplar> = template.pool.iter().filter(|e| e.record.id != record.id).collect();
    if pool.len() < template.shots {
        return Err(Error::InsufficientExemplars {
            needed: template.shots,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(template.seed ^ fnv1a(&record.id));
    for i in 0..template.shots {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut out = String::new();
    for (i, ex) in pool[..template.shots].iter().enumerate() {
        out.push_str(&format!("{EXEMPLAR_DELIMITER} {}\n", i + 1));
        out.push_str(&build_prompt(&ex.record, template.style));
        out.push(' ');
        out.push_str(&ex.solution);
        out.push_str("\n\n");
    }
    out.push_str(TARGET_DELIMITER);
    out.push('\n');
    out.push_str(&target);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnparseableReason {
    NoLabel,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extraction {
    Label(String),
    Unparseable(UnparseableReason),
}

impl Extraction {
    pub fn label(&self) -> Option<&str> {
        match self {
            Extraction::Label(l) => Some(l),
            Extraction::Unparseable(_) => None,
        }
    }
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b >= 0x80
}

fn bounded(text: &[u8], start: usize, len: usize) -> bool {
    let before = start == 0 || !is_word_byte(text[start - 1]);
    let after = start + len >= text.len() || !is_word_byte(text[start + len]);
    before && after
}

fn matches_at(text: &[u8], pos: usize, pat: &[u8], fold: bool) -> bool {
    text.len() >= pos + pat.len()
        && text[pos..pos + pat.len()]
            .iter()
            .zip(pat)
            .all(|(a, b)| if fold { a.eq_ignore_ascii_case(b) } else { a == b })
}

/// Resolves a set of candidate labels found at one position.
fn resolve(found: Vec<&str>) -> Option<Extraction> {
    match found.len() {
        0 => None,
        1 => Some(Extraction::Label(found[0].to_string())),
        _ => Some(Extraction::Unparseable(UnparseableReason::Ambiguous)),
    }
}

fn lone_line(line: &str) -> &str {
    let mut s = line.trim().trim_end_matches(['.', '!']).trim();
    if s.len() >= 2 && s.starts_with('(') && s.ends_with(')') {
        s = s[1..s.len() - 1].trim();
    }
    s
}

fn stage_lone_lines<'a>(text: &str, labels: &'a [String]) -> Option<Extraction> {
    let mut found: Vec<&'a str> = Vec::new();
    for line in text.lines() {
        let s = lone_line(line);
        for l in labels {
            if s.eq_ignore_ascii_case(l) && !found.contains(&l.as_str()) {
                found.push(l);
            }
        }
    }
    resolve(found)
}

const CUE_SEPARATORS: &[u8] = b" \t:(\"'*";

/// Length of a cue pattern matched at `pos` followed by a label, if any.
fn cue_label_at<'a>(text: &[u8], pos: usize, labels: &'a [String]) -> Vec<&'a str> {
    let mut found = Vec::new();
    let mut push = |l: &'a str| {
        if !found.contains(&l) {
            found.push(l);
        }
    };
    let label_after = |start: usize, l: &str, close: Option<u8>| -> bool {
        let lb = l.as_bytes();
        if !matches_at(text, start, lb, true) {
            return false;
        }
        match close {
            Some(c) => text.get(start + lb.len()) == Some(&c),
            None => start + lb.len() >= text.len() || !is_word_byte(text[start + lb.len()]),
        }
    };
    for cue in [&b"answer is"[..], &b"option"[..]] {
        if matches_at(text, pos, cue, true) && bounded(text, pos, cue.len()) {
            let mut start = pos + cue.len();
            while start < text.len() && CUE_SEPARATORS.contains(&text[start]) {
                start += 1;
            }
            if start == pos + cue.len() {
                continue;
            }
            for l in labels {
                if label_after(start, l, None) {
                    push(l);
                }
            }
        }
    }
    if text[pos] == b'(' {
        for l in labels {
            if label_after(pos + 1, l, Some(b')')) {
                push(l);
            }
        }
    }
    found
}

fn stage_cues(text: &str, labels: &[String]) -> Option<Extraction> {
    let bytes = text.as_bytes();
    (0..bytes.len()).find_map(|pos| resolve(cue_label_at(bytes, pos, labels)))
}

fn stage_first_token(text: &str, labels: &[String]) -> Option<Extraction> {
    let bytes = text.as_bytes();
    for pos in 0..bytes.len() {
        let mut found: Vec<&str> = Vec::new();
        for l in labels {
            let lb = l.as_bytes();
            // One-letter labels must match in case so that the article "a" is
            // not read as option A.
            let fold = lb.len() > 1;
            if matches_at(bytes, pos, lb, fold) && bounded(bytes, pos, lb.len()) && !found.contains(&l.as_str()) {
                found.push(l);
            }
        }
        if let Some(e) = resolve(found) {
            return Some(e);
        }
    }
    None
}

/// Reads one label out of free text.
///
/// Tried in order: a line holding nothing but a label; the cues
/// `answer is X`, `(X)` and `option X`; the first standalone label token.
/// Distinct labels at the deciding stage give
/// [`UnparseableReason::Ambiguous`].
pub fn extract_answer(response: &str, labels: &[String]) -> Extraction {
    stage_lone_lines(response, labels)
        .or_else(|| stage_cues(response, labels))
        .or_else(|| stage_first_token(response, labels))
        .unwrap_or(Extraction::Unparseable(UnparseableReason::NoLabel))
}

/// Deterministic synthetic MCQ records with labels drawn in rotation from
/// `classes` and short random questions.
pub fn synthetic_records(n: usize, classes: &[&str], seed: u64) -> Vec<BenchmarkRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let syllables = ["ka", "lo", "mi", "ne", "pu", "ra", "si", "to", "vu", "ze"];
    (0..n)
        .map(|i| {
            let words: Vec<String> = (0..3)
                .map(|_| {
                    (0..2)
                        .map(|_| syllables[rng.random_range(0..syllables.len())])
                        .collect::<String>()
                })
                .collect();
            BenchmarkRecord {
                id: format!("syn-{i:04}"),
                question: format!("{}?", words.join(" ")),
                context: None,
                options: classes.iter().map(|c| (*c, *c)).collect(),
                gold: classes[i % classes.len()].to_string(),
                has_image: false,
                source: Source::Synthetic,
                reference: None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ynm() -> Vec<String> {
        vec!["yes".into(), "no".into(), "maybe".into()]
    }

    fn letters() -> Vec<String> {
        ["A", "B", "C", "D", "E"].iter().map(|s| s.to_string()).collect()
    }

    fn record(context: Option<&str>) -> BenchmarkRecord {
        BenchmarkRecord {
            id: "r1".into(),
            question: "Does aspirin reduce fever?".into(),
            context: context.map(Into::into),
            options: [("yes", "yes"), ("no", "no"), ("maybe", "maybe")].into_iter().collect(),
            gold: "yes".into(),
            has_image: false,
            source: Source::PubmedqaStyle,
            reference: None,
        }
    }

    #[test]
    fn tokenizer_round_trip() {
        assert_eq!(decode(&encode("yes/no/maybe")).unwrap(), "yes/no/maybe");
        assert!(encode("").is_empty());
        assert_eq!(decode(&[104, PAD, 105, EOS]).unwrap(), "hi");
        assert!(matches!(decode(&[258]), Err(Error::UnknownTokenId(258))));
    }

    #[test]
    fn three_step_markers() {
        for ctx in [None, Some("Abstract text."), Some("  ")] {
            let p = build_three_step_prompt(&record(ctx));
            for m in ["Step 1", "Step 2", "Step 3"] {
                assert_eq!(p.matches(m).count(), 1, "{m}");
            }
            assert_eq!(p.contains("Context:"), ctx.is_some_and(|c| !c.trim().is_empty()));
        }
    }

    #[test]
    fn record_validation() {
        let mut r = record(None);
        assert!(r.validate().is_ok());
        r.gold = "perhaps".into();
        assert!(matches!(r.validate(), Err(Error::GoldNotInOptions(_))));
        r.options = Options::default();
        assert!(matches!(r.validate(), Err(Error::NoOptions(_))));
    }

    #[test]
    fn shots() {
        let pool: Vec<Exemplar> = synthetic_records(5, &["yes", "no", "maybe"], 1)
            .into_iter()
            .map(Exemplar::from_record)
            .collect();
        let target = record(None);
        let mut t = PromptTemplate {
            style: PromptStyle::ThreeStep,
            shots: 0,
            pool: pool.clone(),
            seed: 9,
        };
        assert_eq!(build_shots(&t, &target).unwrap(), build_three_step_prompt(&target));
        t.shots = 3;
        let text = build_shots(&t, &target).unwrap();
        assert_eq!(text.matches(EXEMPLAR_DELIMITER).count(), 3);
        let (examples, tail) = text.split_once(TARGET_DELIMITER).unwrap();
        assert_eq!(examples.matches("The answer is").count(), 3);
        assert!(!tail.contains("The answer is"));
        assert_eq!(build_shots(&t, &target).unwrap(), text);
        t.shots = 6;
        assert!(matches!(
            build_shots(&t, &target),
            Err(Error::InsufficientExemplars { needed: 6, available: 5 })
        ));
    }

    #[test]
    fn extraction_cascade() {
        let l = letters();
        assert_eq!(
            extract_answer("The answer is (B) because the lesion is benign.", &l),
            Extraction::Label("B".into())
        );
        assert_eq!(extract_answer("yes, the study supports this", &ynm()), Extraction::Label("yes".into()));
        assert_eq!(
            extract_answer("As an AI I cannot determine this.", &l),
            Extraction::Unparseable(UnparseableReason::NoLabel)
        );
        assert_eq!(extract_answer("Reasoning...\nC\n", &l), Extraction::Label("C".into()));
        assert_eq!(
            extract_answer("A\nB", &l),
            Extraction::Unparseable(UnparseableReason::Ambiguous)
        );
        assert_eq!(extract_answer("I pick option d here", &l), Extraction::Label("D".into()));
        assert_eq!(extract_answer("It is a hard case, E fits", &l), Extraction::Label("E".into()));
    }

    #[test]
    fn options_keep_order_in_json() {
        let r = record(Some("ctx"));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.find("\"yes\"").unwrap() < json.find("\"maybe\"").unwrap());
        let back: BenchmarkRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let dup = r#"{"id":"x","question":"q","options":{"A":"a","A":"b"},"gold":"A","source":"synthetic"}"#;
        assert!(serde_json::from_str::<BenchmarkRecord>(dup).is_err());
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let a = synthetic_records(30, &["yes", "no", "maybe"], 4);
        assert_eq!(a, synthetic_records(30, &["yes", "no", "maybe"], 4));
        assert_eq!(a.iter().filter(|r| r.gold == "no").count(), 10);
        assert!(a.iter().all(|r| r.validate().is_ok()));
    }
}
