"""Losses, Adam, the teacher-forced training loop, evaluation and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .corpus import (BOS, EOS, PAD, ReportSample, Vocab, build_vocab, by_split, detokenize, label_report,
                     normalize, tokenize)
from .knowledge import Symptom, cooccurrence_adjacency
from .metrics import MetricsReport, evaluate_reports
from .model import ModelConfig, forward, greedy_decode, init_params
from .tensor import ParamStore, Tape, Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- losses


def cross_entropy_loss(probs, targets, pad_id: int = PAD) -> Tensor:
    """Mean ``-log p[target]`` over positions whose target is not ``pad_id``."""
    probs = T._lift(probs)
    targets = np.asarray(targets, dtype=np.int64)
    V = probs.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError("target id out of range")
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("no non-padding targets")
    picked = T.pick(probs, targets)
    safe = picked * keep + (~keep).astype(float)
    return T.sum(T.log(safe)) * (-1.0 / count)


def probe_loss(sp, labels) -> Tensor:
    """Mean binary cross-entropy between symptom probabilities and 0/1 labels."""
    sp = T._lift(sp)
    y = np.asarray(labels, dtype=float)
    if y.shape != sp.shape:
        raise ValueError(f"labels shape {y.shape} does not match probabilities {sp.shape}")
    ll = T.log(sp) * y + T.log(1.0 - sp) * (1.0 - y)
    return T.mean(ll) * -1.0


# ---------------------------------------------------------------- optimiser


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 16
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    probe_weight: float = 0.5
    seed: int = 0
    clip_norm: float = 5.0
    min_freq: int = 3
    val_every: int = 1
    eval_batch_size: int = 128

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr and batch_size must be positive, epochs >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ValueError("invalid Adam constants")
        if self.probe_weight < 0 or self.clip_norm < 0:
            raise ValueError("probe_weight and clip_norm must be >= 0")

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> tuple[ParamStore, AdamState]:
    """One bias-corrected Adam update, after optional global-norm clipping.

    Updates ``params`` and ``state`` in place and returns them.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name!r} at step {state.step + 1}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
    scale = 1.0
    if config.clip_norm > 0:
        norm = global_norm(grads)
        if norm > config.clip_norm:
            scale = config.clip_norm / norm
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        g = g * scale
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        params.replace(name, params[name] - update)
    return params, state


# ---------------------------------------------------------------- batching


@dataclass
class EncodedSet:
    features: np.ndarray  # [n, S, d_in]
    inputs: np.ndarray  # [n, L] BOS + tokens, PAD-filled
    targets: np.ndarray  # [n, L] tokens + EOS, PAD-filled
    labels: np.ndarray  # [n, K]
    references: list  # normalised reference word lists


def encode_samples(samples: Sequence[ReportSample], vocab: Vocab, max_len: int) -> EncodedSet:
    ids = [tokenize(s.report, vocab) for s in samples]
    too_long = [s.id for s, x in zip(samples, ids) if len(x) + 1 > max_len]
    if too_long:
        raise ValueError(f"reports longer than max_len - 1 tokens: ids {too_long[:5]}")
    L = max((len(x) + 1 for x in ids), default=1)
    inputs = np.full((len(ids), L), PAD, dtype=np.int64)
    targets = np.full((len(ids), L), PAD, dtype=np.int64)
    for i, x in enumerate(ids):
        inputs[i, : len(x) + 1] = [BOS] + x
        targets[i, : len(x) + 1] = x + [EOS]
    feats = np.stack([s.features for s in samples]) if samples else np.zeros((0, 0, 0))
    labels = np.stack([s.labels for s in samples]) if samples else np.zeros((0, 0), dtype=bool)
    return EncodedSet(feats, inputs, targets, labels, [normalize(s.report).split() for s in samples])


def _trim(inputs, targets):
    width = int((targets != PAD).sum(axis=1).max())
    return inputs[:, :width], targets[:, :width]


def batch_loss(P: Mapping[str, Tensor], config: ModelConfig, features, inputs, targets, labels,
               probe_weight: float) -> tuple[Tensor, float]:
    """Total loss ``CE + probe_weight * BCE``; also returns the CE part."""
    inputs, targets = _trim(inputs, targets)
    probs, sp = forward(P, config, features, inputs)
    ce = cross_entropy_loss(probs, targets)
    total = ce
    if sp is not None and probe_weight > 0:
        total = ce + probe_loss(sp, labels) * probe_weight
    return total, ce.item()


def dataset_loss(params: Mapping[str, np.ndarray], config: ModelConfig, data: EncodedSet, probe_weight: float,
                 batch_size: int = 128) -> float:
    """Token-weighted mean CE plus sample-weighted probe term, no tape."""
    P = {k: Tensor(v) for k, v in params.items()}
    ce_sum = probe_sum = 0.0
    n_tok = 0
    for s in range(0, len(data.inputs), batch_size):
        sl = slice(s, s + batch_size)
        inputs, targets = _trim(data.inputs[sl], data.targets[sl])
        probs, sp = forward(P, config, data.features[sl], inputs)
        k = int((targets != PAD).sum())
        ce_sum += cross_entropy_loss(probs, targets).item() * k
        n_tok += k
        if sp is not None and probe_weight > 0:
            probe_sum += probe_loss(sp, data.labels[sl]).item() * len(targets)
    return ce_sum / n_tok + probe_weight * probe_sum / len(data.inputs)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"KIUT"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamStore
    vocab: Vocab
    step: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Binary layout: magic, u32 version, u32 count, tensors, u32 length + JSON."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(ckpt.params))]
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    trailer = json.dumps({
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.to_list(),
        "step": ckpt.step,
        "meta": ckpt.meta,
    }, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(trailer)))
    chunks.append(trailer)
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptCheckpointError(f"{path}: truncated at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointVersionError(f"{path}: not a KIUT checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    params = ParamStore()
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    (n,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(n).decode("utf-8"))
        config = ModelConfig.from_dict(meta["config"])
        vocab = Vocab(meta["vocab"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: bad metadata block ({exc})") from exc
    if pos != len(buf):
        raise CorruptCheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    expected = init_params(config, 0)
    if list(expected) != list(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise CorruptCheckpointError(f"{path}: tensors do not match the stored model config")
    return Checkpoint(config, params, vocab, int(meta["step"]), meta.get("meta", {}))


# ---------------------------------------------------------------- evaluation


def decode_reports(params, config: ModelConfig, vocab: Vocab, features, batch_size: int = 128) -> list[list[str]]:
    ids = greedy_decode(params, config, features, batch_size=batch_size)
    return [detokenize(x, vocab).split() for x in ids]


def evaluate(params, config: ModelConfig, vocab: Vocab, samples: Sequence[ReportSample],
             lexicon: Sequence[Symptom], batch_size: int = 128) -> MetricsReport:
    """Greedy-decode ``samples`` and score them against their reference reports."""
    if not samples:
        raise ValueError("nothing to evaluate")
    feats = np.stack([s.features for s in samples])
    cands = decode_reports(params, config, vocab, feats, batch_size)
    refs = [normalize(s.report).split() for s in samples]
    pred = [label_report(" ".join(c), lexicon) for c in cands]
    true = [s.labels for s in samples]
    return evaluate_reports(cands, refs, pred, true)


def evaluate_references(samples: Sequence[ReportSample], lexicon: Sequence[Symptom]) -> MetricsReport:
    """Score the reference reports against themselves (pipeline sanity check)."""
    refs = [normalize(s.report).split() for s in samples]
    pred = [label_report(s.report, lexicon) for s in samples]
    return evaluate_reports(refs, refs, pred, [s.labels for s in samples])


# ---------------------------------------------------------------- training loop


def prepare(model_config: ModelConfig, samples: Sequence[ReportSample], min_freq: int = 3):
    """Vocabulary and symptom graph from the training split; returns the completed config."""
    train = by_split(samples, "train")
    vocab = build_vocab([s.report for s in train], min_freq)
    labels = np.stack([s.labels for s in train])
    adjacency = cooccurrence_adjacency(labels, 0.05).astype(int).tolist()
    S = samples[0].features.shape[0] if samples else model_config.num_regions
    if S != model_config.num_regions:
        raise ValueError(f"dataset has {S} regions, model grid has {model_config.num_regions}")
    config = model_config.replace(vocab_size=len(vocab), adjacency=adjacency,
                                  n_symptoms=labels.shape[1], d_in=samples[0].features.shape[1])
    return config, vocab


def train(model_config: ModelConfig, train_config: TrainConfig, samples: Sequence[ReportSample],
          lexicon: Sequence[Symptom], on_epoch: Callable[[dict], None] | None = None,
          vocab: Vocab | None = None):
    """Teacher-forced training; returns ``(best checkpoint, per-epoch log)``.

    Epoch 0 in the log is the loss at initialisation.  The checkpoint keeps the
    parameters with the best validation BLEU-4 (first occurrence on ties);
    without a validation split the final parameters are kept.
    """
    config, built_vocab = prepare(model_config, samples, train_config.min_freq)
    vocab = vocab or built_vocab
    config = config.replace(vocab_size=len(vocab))
    train_set = encode_samples(by_split(samples, "train"), vocab, config.max_len)
    val_samples = by_split(samples, "val")
    params = init_params(config, train_config.seed)
    state = AdamState()
    history: list[dict] = []

    def emit(entry):
        history.append(entry)
        log.info(json.dumps(entry))
        if on_epoch:
            on_epoch(entry)

    emit({"epoch": 0, "train_loss": dataset_loss(params, config, train_set, train_config.probe_weight)})
    best = (-1.0, params.copy(), 0)
    n = len(train_set.inputs)
    for epoch in range(1, train_config.epochs + 1):
        order = np.random.default_rng((train_config.seed, epoch)).permutation(n)
        losses, weights = [], []
        for s in range(0, n, train_config.batch_size):
            idx = order[s:s + train_config.batch_size]
            tape = Tape()
            P = tape.watch_all(params)
            loss, _ = batch_loss(P, config, train_set.features[idx], train_set.inputs[idx],
                                 train_set.targets[idx], train_set.labels[idx], train_config.probe_weight)
            grads = T.backward(tape, loss)
            adam_step(params, grads, state, train_config)
            losses.append(loss.item())
            weights.append(len(idx))
        entry = {"epoch": epoch, "train_loss": float(np.average(losses, weights=weights)), "step": state.step}
        if val_samples and train_config.val_every and epoch % train_config.val_every == 0:
            metrics = evaluate(params, config, vocab, val_samples, lexicon, train_config.eval_batch_size)
            entry["val_bleu4"] = metrics.bleu4
            if metrics.bleu4 > best[0]:
                best = (metrics.bleu4, params.copy(), epoch)
        emit(entry)
    if best[0] < 0:
        best = (float("nan"), params.copy(), train_config.epochs)
    ckpt = Checkpoint(config, best[1], vocab, step=state.step,
                      meta={"best_epoch": best[2], "seed": train_config.seed})
    return ckpt, history
