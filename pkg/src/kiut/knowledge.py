"""Contextual and clinical knowledge signals, plus the symptom probability probe."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .attention import causal_mask, multi_head_attention
from .decoder import embed_tokens
from .tensor import Tensor, subset


@dataclass(frozen=True)
class Symptom:
    name: str
    keywords: tuple[str, ...]


def read_lexicon(path) -> list[Symptom]:
    """Parse ``name<TAB>kw1,kw2`` lines."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, kws = line.split("\t")
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected name<TAB>keywords") from None
        keywords = tuple(k.strip().lower() for k in kws.split(",") if k.strip())
        if not keywords:
            raise ValueError(f"{path}:{lineno}: symptom {name!r} has no keywords")
        out.append(Symptom(name.strip(), keywords))
    return out


def write_lexicon(path, lexicon: Sequence[Symptom]) -> None:
    lines = [f"{s.name}\t{','.join(s.keywords)}" for s in lexicon]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cooccurrence_adjacency(labels: np.ndarray, threshold: float = 0.05) -> np.ndarray:
    """Edge (i, j) iff symptoms i and j co-occur in at least ``threshold`` of samples.

    Self-loops are always present.
    """
    labels = np.asarray(labels, dtype=float)
    K = labels.shape[1]
    if len(labels) == 0:
        return np.eye(K, dtype=bool)
    rate = labels.T @ labels / len(labels)
    adj = rate >= threshold
    np.fill_diagonal(adj, True)
    return adj


def contextual_signal(tokens, params: Mapping[str, Tensor], config) -> Tensor:
    """Causal masked attention over context embeddings of the generated tokens."""
    E = embed_tokens(tokens, params["ctx.embed"], config.max_len, config.n_heads)
    mask = causal_mask(E.shape[-2])
    return multi_head_attention(E, E, subset(params, "ctx.attn"), config.n_heads, mask=mask)


def symptom_probabilities(features, params: Mapping[str, Tensor]) -> Tensor:
    """``sigmoid(mean_regions(features) W + b)``, one probability per symptom."""
    pooled = T.mean(T._lift(features), axis=-2, keepdims=True)  # [.., 1, d]
    logits = T.linear(pooled, params["probe.w"], params["probe.b"])
    return T.sigmoid(T.reshape(logits, (*logits.shape[:-2], logits.shape[-1])))


def init_graph(sp, sf) -> Tensor:
    """Node states ``sg_i = sp_i * sf_i``."""
    sp, sf = T._lift(sp), T._lift(sf)
    if sp.shape[-1] != sf.shape[0]:
        raise ValueError("symptom probabilities and node embeddings disagree on K")
    return T.mul(T.reshape(sp, (*sp.shape, 1)), sf)


def gat_layer(sg, adjacency, w, a, slope: float = 0.2, return_weights: bool = False):
    """Single-head graph attention.

    ``e_ij = leaky_relu(a . [W sg_i ; W sg_j])`` over neighbors j of i,
    normalised by softmax, output ``sum_j alpha_ij W sg_j``.
    """
    sg = T._lift(sg)
    adjacency = np.asarray(adjacency, dtype=bool)
    K, d = sg.shape[-2], w.shape[1]
    if adjacency.shape != (K, K):
        raise ValueError("adjacency does not match node count")
    if not adjacency.diagonal().all():
        raise ValueError("adjacency needs self-loops on every node")
    wh = T.matmul(sg, w)
    a = T._lift(a)
    src = T.matmul(wh, T.reshape(a[:d], (d, 1)))  # [.., K, 1]
    dst = T.matmul(wh, T.reshape(a[d:], (d, 1)))
    e = T.leaky_relu(src + T.swapaxes(dst, -1, -2), slope)
    alpha = T.softmax_rows(e, adjacency)
    out = T.matmul(alpha, wh)
    return (out, alpha) if return_weights else out


def clinical_signal(projected, params: Mapping[str, Tensor], config):
    """Probe -> node initialisation -> GAT.  Returns ``(C_tilde, sp)``."""
    sp = symptom_probabilities(projected, params)
    sg = init_graph(sp, params["graph.sf"])
    adjacency = np.asarray(config.adjacency, dtype=bool)
    return gat_layer(sg, adjacency, params["gat.w"], params["gat.a"], config.gat_slope), sp
