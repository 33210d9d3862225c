"""Synthetic paired region-feature / report corpus, vocabulary and rule-based labeler.

Each symptom owns a grid cell and a fixed feature signature.  A sample draws a
symptom subset (with correlated pairs), stamps every active signature into its
cell (and a neighbouring cell when the finding is severe), adds Gaussian
noise, and writes a report: one templated sentence per active symptom in
region order, interleaved with normal-finding sentences for absent groups.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .knowledge import Symptom

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Finding:
    name: str
    keyword: str
    cell: tuple[int, int]  # (row, col) on the reference 7x7 grid
    template: str
    severity: tuple[str, str]


# Listed in row-major order of their cells, which is also the report order.
CATALOGUE: tuple[Finding, ...] = (
    Finding("nodule", "nodule", (1, 2), "a {} nodule is seen in the upper lobe", ("small", "large")),
    Finding("pneumothorax", "pneumothorax", (1, 5), "there is a {} apical pneumothorax", ("small", "large")),
    Finding("fracture", "fracture", (2, 0), "an {} rib fracture is noted", ("old", "acute")),
    Finding("cardiomegaly", "cardiomegaly", (3, 3), "{} cardiomegaly is present", ("mild", "moderate")),
    Finding("edema", "edema", (3, 5), "{} pulmonary edema is noted", ("mild", "moderate")),
    Finding("consolidation", "consolidation", (4, 1), "there is {} consolidation in the lower lobe",
            ("patchy", "dense")),
    Finding("atelectasis", "atelectasis", (5, 4), "{} basilar atelectasis is seen", ("minor", "extensive")),
    Finding("effusion", "effusion", (6, 2), "there is a {} pleural effusion", ("small", "large")),
)

# (sentence, symptoms whose absence it asserts, catalogue index it is placed before)
NORMAL_FINDINGS = (
    ("the lungs are clear", ("nodule", "edema", "consolidation", "atelectasis"), 0),
    ("the osseous structures are intact", ("fracture",), 2),
    ("the heart size is normal", ("cardiomegaly",), 3),
    ("there is no pleural abnormality", ("pneumothorax", "effusion"), 7),
)

CORRELATED_PAIRS = (("effusion", "atelectasis"), ("cardiomegaly", "edema"), ("consolidation", "effusion"))


def default_lexicon(n_symptoms: int = 8) -> list[Symptom]:
    return [Symptom(f.name, (f.keyword,)) for f in CATALOGUE[:n_symptoms]]


@dataclass
class GeneratorSpec:
    n: int = 2000
    grid_w: int = 7
    grid_h: int = 7
    d_in: int = 16
    n_symptoms: int = 8
    noise: float = 0.1
    amplitude: float = 1.0
    base_rate: float = 0.2
    pair_rate: float = 0.6
    max_active: int = 3
    signature_seed: int = 1234
    split_ratio: tuple[float, float, float] = field(default=(0.7, 0.1, 0.2))

    def validate(self) -> None:
        if not 1 <= self.n_symptoms <= len(CATALOGUE):
            raise ValueError(f"n_symptoms must be in 1..{len(CATALOGUE)}")
        if self.grid_w < 1 or self.grid_h < 1:
            raise ValueError("grid must have positive size")
        if self.n < 0 or self.d_in < 1 or self.max_active < 1:
            raise ValueError("invalid generator sizes")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    @property
    def num_regions(self) -> int:
        return self.grid_w * self.grid_h


@dataclass
class ReportSample:
    id: int
    features: np.ndarray  # [S, d_in]
    report: str
    labels: np.ndarray  # bool [K]
    split: str = "train"

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id,
            "features": self.features.tolist(),
            "report": self.report,
            "labels": [int(x) for x in self.labels],
            "split": self.split,
        })

    @classmethod
    def from_json(cls, line: str) -> "ReportSample":
        obj = json.loads(line)
        return cls(
            id=int(obj["id"]),
            features=np.asarray(obj["features"], dtype=float),
            report=obj["report"],
            labels=np.asarray(obj["labels"], dtype=bool),
            split=obj["split"],
        )


def finding_cell(finding: Finding, grid_w: int, grid_h: int) -> tuple[int, int]:
    """Map the reference 7x7 cell onto the requested grid."""
    r, c = finding.cell
    return round(r * (grid_h - 1) / 6), round(c * (grid_w - 1) / 6)


def signatures(spec: GeneratorSpec) -> np.ndarray:
    """Unit-norm feature signature per symptom, scaled by ``amplitude``."""
    rng = np.random.default_rng(spec.signature_seed)
    sig = rng.normal(size=(len(CATALOGUE), spec.d_in))
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    return spec.amplitude * sig[: spec.n_symptoms]


def compose_report(active: Sequence[int], severe: Sequence[bool], n_symptoms: int) -> str:
    catalogue = CATALOGUE[:n_symptoms]
    names = {catalogue[k].name for k in active}
    known = {f.name for f in catalogue}
    slots: list[tuple[float, str]] = []
    for sentence, covers, before in NORMAL_FINDINGS:
        relevant = [c for c in covers if c in known]
        if relevant and not names.intersection(relevant):
            slots.append((before - 0.5, sentence))
    for k, sev in zip(active, severe):
        f = catalogue[k]
        slots.append((k, f.template.format(f.severity[int(sev)])))
    slots.sort(key=lambda s: s[0])
    return " ".join(s for _, s in slots)


def draw_symptoms(rng: np.random.Generator, spec: GeneratorSpec) -> tuple[list[int], list[bool]]:
    K = spec.n_symptoms
    index = {f.name: k for k, f in enumerate(CATALOGUE[:K])}
    active = rng.random(K) < spec.base_rate
    for a, b in CORRELATED_PAIRS:
        if a in index and b in index:
            ia, ib = index[a], index[b]
            u = rng.random()
            if active[ia] and u < spec.pair_rate:
                active[ib] = True
            elif active[ib] and u < spec.pair_rate:
                active[ia] = True
    chosen = np.flatnonzero(active)
    if len(chosen) > spec.max_active:
        chosen = np.sort(rng.choice(chosen, size=spec.max_active, replace=False))
    severe = rng.random(len(chosen)) < 0.5
    return [int(k) for k in chosen], [bool(s) for s in severe]


def render_features(active, severe, spec: GeneratorSpec, rng: np.random.Generator | None,
                    sig: np.ndarray | None = None) -> np.ndarray:
    sig = signatures(spec) if sig is None else sig
    feats = np.zeros((spec.num_regions, spec.d_in))
    for k, sev in zip(active, severe):
        r, c = finding_cell(CATALOGUE[k], spec.grid_w, spec.grid_h)
        cells = [(r, c)]
        if sev and spec.grid_h > 1:
            cells.append((r - 1 if r > 0 else r + 1, c))
        for rr, cc in cells:
            feats[rr * spec.grid_w + cc] += sig[k]
    if spec.noise > 0 and rng is not None:
        feats += spec.noise * rng.normal(size=feats.shape)
    return feats


def split_sizes(n: int, ratio=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    n_train = int(round(ratio[0] * n))
    n_val = int(round(ratio[1] * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def generate_dataset(spec: GeneratorSpec, seed: int) -> list[ReportSample]:
    """Generate ``spec.n`` samples; sample ``i`` uses its own RNG stream ``(seed, i)``."""
    spec.validate()
    sig = signatures(spec)
    n_train, n_val, _ = split_sizes(spec.n, spec.split_ratio)
    samples = []
    for i in range(spec.n):
        rng = np.random.default_rng((seed, i))
        active, severe = draw_symptoms(rng, spec)
        labels = np.zeros(spec.n_symptoms, dtype=bool)
        labels[active] = True
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        samples.append(ReportSample(
            id=i,
            features=render_features(active, severe, spec, rng, sig),
            report=compose_report(active, severe, spec.n_symptoms),
            labels=labels,
            split=split,
        ))
    return samples


def by_split(samples: Iterable[ReportSample], split: str) -> list[ReportSample]:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return [s for s in samples if s.split == split]


def write_jsonl(path, samples: Iterable[ReportSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def read_jsonl(path) -> list[ReportSample]:
    with open(path, encoding="utf-8") as fh:
        return [ReportSample.from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- vocabulary

_NON_WORD = re.compile(r"[^a-z]+")


def normalize(text: str) -> str:
    """Lowercase and drop digits / non-alphanumeric characters."""
    return " ".join(_NON_WORD.sub(" ", text.lower()).split())


@dataclass
class Vocab:
    itos: list[str]

    def __post_init__(self):
        if tuple(self.itos[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.itos)

    def to_list(self) -> list[str]:
        return list(self.itos)


def build_vocab(texts: Iterable[str], min_freq: int = 3) -> Vocab:
    """Tokens with count >= ``min_freq``, most frequent first, ties alphabetical."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    texts = list(texts)
    if not texts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for t in texts for tok in normalize(t).split())
    kept = sorted((tok for tok, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + kept)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.stoi.get(tok, UNK) for tok in normalize(text).split()]


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i in (PAD, BOS, EOS):
            continue
        words.append(vocab.itos[i] if 0 <= i < len(vocab) else RESERVED[UNK])
    return " ".join(words)


def label_report(text: str, lexicon: Sequence[Symptom]) -> np.ndarray:
    """Symptom k is positive iff one of its keywords is a substring of the lowercased text."""
    low = text.lower()
    return np.array([any(kw in low for kw in s.keywords) for s in lexicon], dtype=bool)
