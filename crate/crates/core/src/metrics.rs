//! BLEU, ROUGE-N and label accuracy over lowercase whitespace tokens.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing constant for zero n-gram precisions.
pub const SMOOTHING_EPS: f64 = 1e-9;

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("n-gram order must be >= 1".into()));
    }
    Ok(())
}

/// Clipped n-gram matches over candidate n-grams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub numerator: usize,
    pub denominator: usize,
}

impl Ratio {
    /// `0` when the denominator is `0`.
    pub fn value(&self) -> f64 {
        if self.denominator == 0 {
            0.0
        } else {
            self.numerator as f64 / self.denominator as f64
        }
    }
}

pub fn modified_precision(candidate: &[String], references: &[Vec<String>], n: usize) -> Result<Ratio> {
    check_n(n)?;
    if references.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let cand = ngrams(candidate, n);
    let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
    for r in references {
        for (g, c) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let numerator = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    Ok(Ratio {
        numerator,
        denominator: cand.values().sum(),
    })
}

/// Length of the reference closest to `c`, the shorter one on ties.
fn closest_ref_len(c: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// `exp(1 − r/c)` when `c ≤ r`, otherwise 1.
pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        libm::exp(1.0 - r as f64 / c as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub counts: Vec<Ratio>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
    pub smoothed: bool,
}

fn combine(counts: Vec<Ratio>, c: usize, r: usize, smoothing: bool) -> BleuReport {
    let max_n = counts.len();
    let mut precisions = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for ratio in &counts {
        let p = if ratio.numerator > 0 {
            ratio.value()
        } else if smoothing {
            SMOOTHING_EPS / ratio.denominator.max(1) as f64
        } else {
            zero = true;
            0.0
        };
        if p > 0.0 {
            log_sum += libm::log(p);
        }
        precisions.push(p);
    }
    let bp = brevity_penalty(c, r);
    let bleu = if zero { 0.0 } else { bp * libm::exp(log_sum / max_n as f64) };
    BleuReport {
        bleu,
        precisions,
        counts,
        brevity_penalty: bp,
        candidate_len: c,
        reference_len: r,
        smoothed: smoothing,
    }
}

/// Sentence BLEU with uniform weights over orders `1..=max_n`.
///
/// With `smoothing` off, any zero precision makes the score zero.
pub fn sentence_bleu(candidate: &[String], references: &[Vec<String>], max_n: usize, smoothing: bool) -> Result<BleuReport> {
    check_n(max_n)?;
    if candidate.is_empty() {
        return Err(Error::EmptyCandidate);
    }
    let counts = (1..=max_n)
        .map(|n| modified_precision(candidate, references, n))
        .collect::<Result<Vec<_>>>()?;
    let r = closest_ref_len(candidate.len(), references);
    Ok(combine(counts, candidate.len(), r, smoothing))
}

/// Smoothed sentence BLEU (always defined).
pub fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> Result<BleuReport> {
    sentence_bleu(candidate, references, max_n, true)
}

/// Corpus BLEU: clipped counts and lengths are summed before combining.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)], max_n: usize) -> Result<BleuReport> {
    check_n(max_n)?;
    if pairs.is_empty() {
        return Err(Error::Empty);
    }
    let mut counts = alloc::vec![
        Ratio {
            numerator: 0,
            denominator: 0
        };
        max_n
    ];
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in pairs {
        for (n, total) in counts.iter_mut().enumerate() {
            let m = modified_precision(cand, refs, n + 1)?;
            total.numerator += m.numerator;
            total.denominator += m.denominator;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
    }
    if c == 0 {
        return Err(Error::EmptyCandidate);
    }
    Ok(combine(counts, c, r, true))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub n: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub matched: usize,
    pub reference_total: usize,
    pub candidate_total: usize,
    /// No reference is long enough to contain an n-gram.
    pub degenerate: bool,
}

/// ROUGE-N recall: clipped matches over reference n-grams, summed across
/// references. Precision and F1 are extras.
pub fn rouge_n(candidate: &[String], references: &[Vec<String>], n: usize) -> Result<RougeReport> {
    check_n(n)?;
    if references.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let cand = ngrams(candidate, n);
    let cand_total: usize = cand.values().sum();
    let (mut matched, mut ref_total) = (0, 0);
    for r in references {
        let rg = ngrams(r, n);
        ref_total += rg.values().sum::<usize>();
        matched += rg
            .iter()
            .map(|(g, &c)| c.min(cand.get(g).copied().unwrap_or(0)))
            .sum::<usize>();
    }
    let recall = if ref_total == 0 { 0.0 } else { matched as f64 / ref_total as f64 };
    let cand_slots = cand_total * references.len();
    let precision = if cand_slots == 0 { 0.0 } else { matched as f64 / cand_slots as f64 };
    let f1 = if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    };
    Ok(RougeReport {
        n,
        recall,
        precision,
        f1,
        matched,
        reference_total: ref_total,
        candidate_total: cand_total,
        degenerate: ref_total == 0,
    })
}

/// Corpus ROUGE-N: match and reference tallies summed over pairs.
pub fn corpus_rouge_n(pairs: &[(Vec<String>, Vec<Vec<String>>)], n: usize) -> Result<RougeReport> {
    if pairs.is_empty() {
        return Err(Error::Empty);
    }
    let (mut matched, mut ref_total, mut cand_total, mut cand_slots) = (0, 0, 0, 0);
    for (c, refs) in pairs {
        let r = rouge_n(c, refs, n)?;
        matched += r.matched;
        ref_total += r.reference_total;
        cand_total += r.candidate_total;
        cand_slots += r.candidate_total * refs.len();
    }
    let recall = if ref_total == 0 { 0.0 } else { matched as f64 / ref_total as f64 };
    let precision = if cand_slots == 0 { 0.0 } else { matched as f64 / cand_slots as f64 };
    let f1 = if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    };
    Ok(RougeReport {
        n,
        recall,
        precision,
        f1,
        matched,
        reference_total: ref_total,
        candidate_total: cand_total,
        degenerate: ref_total == 0,
    })
}

/// Case-insensitive exact-match rate.
pub fn accuracy<P: AsRef<str>, G: AsRef<str>>(predictions: &[P], gold: &[G]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::LengthMismatch(predictions.len(), gold.len()));
    }
    if gold.is_empty() {
        return Err(Error::Empty);
    }
    let hits = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.as_ref().to_lowercase() == g.as_ref().to_lowercase())
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub per_n_precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub rouge_recall: f64,
    pub rouge_n: usize,
    pub bleu_counts: Vec<Ratio>,
    pub rouge_matched: usize,
    pub rouge_reference_total: usize,
    pub pairs: usize,
}

/// Corpus BLEU-`bleu_n` and ROUGE-`rouge_n` over aligned candidate and
/// reference texts (one reference per candidate).
pub fn score_texts<C: AsRef<str>, R: AsRef<str>>(
    candidates: &[C],
    references: &[R],
    bleu_n: usize,
    rouge_order: usize,
) -> Result<MetricReport> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch(candidates.len(), references.len()));
    }
    let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| (tokenize(c.as_ref()), alloc::vec![tokenize(r.as_ref())]))
        .collect();
    let b = corpus_bleu(&pairs, bleu_n)?;
    let r = corpus_rouge_n(&pairs, rouge_order)?;
    Ok(MetricReport {
        bleu: b.bleu,
        per_n_precisions: b.precisions,
        brevity_penalty: b.brevity_penalty,
        rouge_recall: r.recall,
        rouge_n: rouge_order,
        bleu_counts: b.counts,
        rouge_matched: r.matched,
        rouge_reference_total: r.reference_total,
        pairs: pairs.len(),
    })
}

/// `"{num}/{den}"`.
pub fn ratio_string(r: &Ratio) -> String {
    format!("{}/{}", r.numerator, r.denominator)
}
