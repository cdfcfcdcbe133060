"""Regenerates fixtures/bleu_corpus.json from the pairs it lists.

BLEU comes from nltk (corpus and sentence level, epsilon smoothing at 1e-9);
ROUGE-N recall is a brute-force count written independently here.
"""
import json
import sys
from collections import Counter
from pathlib import Path

from nltk.translate.bleu_score import SmoothingFunction, corpus_bleu, modified_precision, sentence_bleu, brevity_penalty, closest_ref_length

PATH = Path(__file__).resolve().parent.parent / "bleu_corpus.json"
SMOOTH = SmoothingFunction(epsilon=1e-9).method1


def tok(s):
    return s.lower().split()


def rouge_counts(cand, refs, n):
    grams = lambda t: Counter(tuple(t[i:i + n]) for i in range(len(t) - n + 1))
    c = grams(cand)
    matched = total = 0
    for r in refs:
        g = grams(r)
        total += sum(g.values())
        matched += sum(min(v, c[k]) for k, v in g.items())
    return matched, total


def main():
    data = json.loads(PATH.read_text())
    cands = [tok(p["candidate"]) for p in data["pairs"]]
    refs = [[tok(r) for r in p["references"]] for p in data["pairs"]]
    weights = (0.25, 0.25, 0.25, 0.25)
    precisions = []
    for n in range(1, 5):
        num = den = 0
        for c, rs in zip(cands, refs):
            p = modified_precision(rs, c, n)
            num += p.numerator
            den += p.denominator
        precisions.append([num, den])
    hyp_len = sum(len(c) for c in cands)
    ref_len = sum(closest_ref_length(rs, len(c)) for c, rs in zip(cands, refs))
    m = r = 0
    for c, rs in zip(cands, refs):
        a, b = rouge_counts(c, rs, 1)
        m += a
        r += b
    data["expected"] = {
        "corpus_bleu4": corpus_bleu(refs, cands, weights, smoothing_function=SMOOTH),
        "corpus_clipped_counts": precisions,
        "candidate_len": hyp_len,
        "reference_len": ref_len,
        "brevity_penalty": brevity_penalty(ref_len, hyp_len),
        "sentence_bleu4": [sentence_bleu(rs, c, weights, smoothing_function=SMOOTH) for c, rs in zip(cands, refs)],
        "corpus_rouge1_recall": m / r,
        "rouge1_matched": m,
        "rouge1_reference_total": r,
    }
    PATH.write_text(json.dumps(data, indent=2) + "\n")
    json.dump(data["expected"], sys.stdout, indent=2)


if __name__ == "__main__":
    main()
