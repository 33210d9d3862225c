"""Corpus BLEU, ROUGE-L and clinical-efficacy scores."""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> list[float]:
    """Corpus-level BLEU-1..BLEU-``max_n`` (single reference, no smoothing).

    Clipped n-gram matches and candidate n-gram counts are summed over the
    corpus before dividing; BLEU-k is the brevity penalty times the geometric
    mean of precisions 1..k.
    """
    if len(candidates) != len(references):
        raise ValueError("candidate and reference counts differ")
    if not candidates:
        raise ValueError("empty corpus")
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must be in 1..4")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            c_grams = _ngrams(cand, n)
            r_grams = _ngrams(ref, n)
            matches[n - 1] += sum(min(cnt, r_grams[g]) for g, cnt in c_grams.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if matches[n] == 0 or totals[n] == 0:
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matches[n] / totals[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> float:
    """LCS F-measure with beta = 1."""
    if not reference:
        raise ValueError("empty reference")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 2 * p * r / (p + r)


def corpus_rouge_l(candidates: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    if len(candidates) != len(references):
        raise ValueError("candidate and reference counts differ")
    if not candidates:
        raise ValueError("empty corpus")
    return float(np.mean([rouge_l(c, r) for c, r in zip(candidates, references)]))


class CEScores(NamedTuple):
    precision: float
    recall: float
    f1: float


def clinical_efficacy(pred_labels, true_labels) -> CEScores:
    """Micro-averaged precision / recall / F1 over every (sample, symptom) cell.

    A zero denominator yields 0 and emits a ``RuntimeWarning``.
    """
    pred = np.asarray(pred_labels, dtype=bool)
    true = np.asarray(true_labels, dtype=bool)
    if pred.shape != true.shape:
        raise ValueError(f"label shapes differ: {pred.shape} vs {true.shape}")
    tp = int((pred & true).sum())
    fp = int((pred & ~true).sum())
    fn = int((~pred & true).sum())

    def ratio(num, den):
        if den == 0:
            warnings.warn("clinical efficacy: zero division, reporting 0", RuntimeWarning, stacklevel=3)
            return 0.0
        return num / den

    p = ratio(tp, tp + fp)
    r = ratio(tp, tp + fn)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return CEScores(p, r, f1)


@dataclass
class MetricsReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    ce_precision: float
    ce_recall: float
    ce_f1: float
    exact_match: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data) -> "MetricsReport":
        return cls(**{f.name: float(data[f.name]) for f in dataclasses.fields(cls)})


def evaluate_reports(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
                     pred_labels, true_labels) -> MetricsReport:
    b = bleu(candidates, references, 4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ce = clinical_efficacy(pred_labels, true_labels)
    exact = float(np.mean([list(c) == list(r) for c, r in zip(candidates, references)]))
    return MetricsReport(*b, corpus_rouge_l(candidates, references), ce.precision, ce.recall, ce.f1, exact)
