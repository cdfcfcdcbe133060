//! Checks against the committed files under `fixtures/`.

use std::fs;
use std::path::PathBuf;

use ecibench_core::metrics::{accuracy, corpus_bleu, corpus_rouge_n, modified_precision, sentence_bleu, tokenize};
use ecibench_core::prompts::{
    build_shots, build_three_step_prompt, extract_answer, BenchmarkRecord, Exemplar, Extraction, PromptStyle,
    PromptTemplate, EXEMPLAR_DELIMITER,
};
use ecibench_core::quant::nf4_codebook;
use serde::Deserialize;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn read(name: &str) -> String {
    fs::read_to_string(fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn jsonl(name: &str) -> Vec<BenchmarkRecord> {
    read(name)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[derive(Deserialize)]
struct ExtractionCase {
    response: String,
    labels: Vec<String>,
    expected: Extraction,
    note: String,
}

#[test]
fn extraction_table() {
    let cases: Vec<ExtractionCase> = serde_json::from_str(&read("extraction_cases.json")).unwrap();
    assert_eq!(cases.len(), 40);
    let mut wrong = Vec::new();
    for c in &cases {
        let got = extract_answer(&c.response, &c.labels);
        if got != c.expected {
            wrong.push(format!("{:?} ({}): got {:?}, want {:?}", c.response, c.note, got, c.expected));
        }
        // Pure function: a second call agrees.
        assert_eq!(extract_answer(&c.response, &c.labels), got);
    }
    assert!(wrong.is_empty(), "{}", wrong.join("\n"));
}

/// Compares with a committed prompt; `ECIBENCH_BLESS=1` rewrites it.
fn golden(name: &str, actual: &str) {
    let path = fixture(&format!("golden/{name}"));
    if std::env::var("ECIBENCH_BLESS").as_deref() == Ok("1") {
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "golden file {name} differs");
}

#[test]
fn golden_three_step_prompts() {
    let pqa = jsonl("pubmedqa_mini.jsonl");
    golden("three_step_pubmedqa.txt", &build_three_step_prompt(&pqa[0]));
    let usmle = jsonl("usmle_step1.jsonl");
    let prompt = build_three_step_prompt(&usmle[0]);
    assert!(!prompt.contains("Context:"));
    golden("three_step_usmle.txt", &prompt);
}

#[test]
fn golden_three_shot_prompt() {
    let recs = jsonl("pubmedqa_mini.jsonl");
    let pool: Vec<Exemplar> = recs[1..].iter().filter(|r| !r.has_image).cloned().map(Exemplar::from_record).collect();
    let template = PromptTemplate {
        style: PromptStyle::ThreeStep,
        shots: 3,
        pool,
        seed: 0,
    };
    let text = build_shots(&template, &recs[0]).unwrap();
    assert_eq!(text.matches(EXEMPLAR_DELIMITER).count(), 3);
    golden("three_shot_pubmedqa.txt", &text);
}

#[derive(Deserialize)]
struct Codebook {
    values: Vec<f64>,
    tolerance: f64,
}

#[test]
fn nf4_codebook_matches_published_table() {
    let published: Codebook = serde_json::from_str(&read("nf4_codebook.json")).unwrap();
    let ours = nf4_codebook();
    assert_eq!(published.values.len(), 16);
    for (i, (a, b)) in ours.iter().zip(&published.values).enumerate() {
        assert!((a - b).abs() <= published.tolerance, "code {i}: {a} vs {b}");
    }
}

#[derive(Deserialize)]
struct Pair {
    candidate: String,
    references: Vec<String>,
}

#[derive(Deserialize)]
struct BleuExpected {
    corpus_bleu4: f64,
    corpus_clipped_counts: Vec<(usize, usize)>,
    candidate_len: usize,
    reference_len: usize,
    brevity_penalty: f64,
    sentence_bleu4: Vec<f64>,
    corpus_rouge1_recall: f64,
    rouge1_matched: usize,
    rouge1_reference_total: usize,
}

#[derive(Deserialize)]
struct BleuFixture {
    pairs: Vec<Pair>,
    expected: BleuExpected,
}

#[test]
fn bleu_and_rouge_fixture_corpus() {
    let fx: BleuFixture = serde_json::from_str(&read("bleu_corpus.json")).unwrap();
    let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = fx
        .pairs
        .iter()
        .map(|p| (tokenize(&p.candidate), p.references.iter().map(|r| tokenize(r)).collect()))
        .collect();
    assert_eq!(pairs.len(), 8);
    let e = &fx.expected;
    let report = corpus_bleu(&pairs, 4).unwrap();
    let counts: Vec<(usize, usize)> = report.counts.iter().map(|r| (r.numerator, r.denominator)).collect();
    assert_eq!(counts, e.corpus_clipped_counts);
    assert!(counts.iter().all(|&(n, _)| n > 0));
    assert_eq!((report.candidate_len, report.reference_len), (e.candidate_len, e.reference_len));
    assert!((report.brevity_penalty - e.brevity_penalty).abs() <= 1e-9);
    assert!((report.bleu - e.corpus_bleu4).abs() <= 1e-9, "{} vs {}", report.bleu, e.corpus_bleu4);
    for (i, ((c, r), want)) in pairs.iter().zip(&e.sentence_bleu4).enumerate() {
        let got = sentence_bleu(c, r, 4, true).unwrap().bleu;
        assert!((got - want).abs() <= 1e-9, "pair {i}: {got} vs {want}");
    }
    let rouge = corpus_rouge_n(&pairs, 1).unwrap();
    assert_eq!((rouge.matched, rouge.reference_total), (e.rouge1_matched, e.rouge1_reference_total));
    assert!((rouge.recall - e.corpus_rouge1_recall).abs() <= 1e-9);
}

#[test]
fn clipped_precision_hand_case() {
    let c = tokenize("the the the the the the the");
    let r = vec![tokenize("the cat is on the mat")];
    let p = modified_precision(&c, &r, 1).unwrap();
    assert_eq!((p.numerator, p.denominator), (2, 7));
}

#[derive(Deserialize)]
struct Tally {
    predictions: Vec<String>,
    gold: Vec<String>,
    expected_correct: usize,
    expected_accuracy: f64,
}

#[test]
fn accuracy_matches_independent_tally() {
    let t: Tally = serde_json::from_str(&read("accuracy_500.json")).unwrap();
    assert_eq!(t.gold.len(), 500);
    let acc = accuracy(&t.predictions, &t.gold).unwrap();
    assert_eq!(acc, t.expected_correct as f64 / 500.0);
    assert_eq!(acc, t.expected_accuracy);
}
