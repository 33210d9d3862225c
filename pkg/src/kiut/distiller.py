"""Injected knowledge distiller and the vocabulary output head.

Position ``i`` of the decoder output attends over its own feature block
``F_i = [X_visual; C_clinical; w_i]``.  All positions share the visual and
clinical rows and differ only in the final contextual row, which
:func:`distill_signals` exploits to score the shared rows with one matmul.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

from . import tensor as T
from .attention import merge_heads, multi_head_attention, split_heads
from .tensor import Tensor


def build_injected(X_visual, C_clinical, W_context, use_clinical: bool = True,
                   use_contextual: bool = True) -> list[Tensor]:
    """Per-position feature blocks for a single (unbatched) sample."""
    X_visual = T._lift(X_visual)
    d = X_visual.shape[-1]
    blocks = [X_visual]
    if use_clinical:
        C_clinical = T._lift(C_clinical)
        if C_clinical.shape[-1] != d:
            raise ValueError("clinical features have the wrong width")
        blocks.append(C_clinical)
    W_context = T._lift(W_context)
    if W_context.shape[-1] != d:
        raise ValueError("contextual features have the wrong width")
    shared = T.concat(blocks, axis=0) if len(blocks) > 1 else X_visual
    if not use_contextual:
        return [shared] * W_context.shape[0]
    return [T.concat([shared, W_context[i:i + 1]], axis=0) for i in range(W_context.shape[0])]


def distill(h, injected: Sequence, p: Mapping[str, Tensor], n_heads: int) -> Tensor:
    """Row ``i`` = multi-head attention of ``h[i]`` over ``injected[i]``."""
    h = T._lift(h)
    if len(injected) != h.shape[0]:
        raise ValueError(f"{len(injected)} feature blocks for {h.shape[0]} positions")
    rows = [multi_head_attention(h[i:i + 1], F, p, n_heads) for i, F in enumerate(injected)]
    return T.concat(rows, axis=0)


def distill_signals(h, X_visual, C_clinical, W_context, p: Mapping[str, Tensor], n_heads: int,
                    return_weights: bool = False):
    """Batched equivalent of ``distill(h, build_injected(...))``.

    ``C_clinical`` / ``W_context`` set to None drop those rows.
    """
    h = T._lift(h)
    shared = T._lift(X_visual)
    if C_clinical is not None:
        shared = T.concat([shared, C_clinical], axis=-2)
    n_shared = shared.shape[-2]
    scale = 1.0 / math.sqrt(h.shape[-1] // n_heads)
    q = split_heads(T.matmul(h, p["wq"]), n_heads)
    ks = split_heads(T.matmul(shared, p["wk"]), n_heads)
    vs = split_heads(T.matmul(shared, p["wv"]), n_heads)
    scores = T.matmul(q, T.swapaxes(ks, -1, -2)) * scale
    if W_context is None:
        w = T.softmax_rows(scores)
        out = T.matmul(w, vs)
    else:
        kc = split_heads(T.matmul(W_context, p["wk"]), n_heads)
        vc = split_heads(T.matmul(W_context, p["wv"]), n_heads)
        own = T.sum(q * kc, axis=-1, keepdims=True) * scale
        w = T.softmax_rows(T.concat([scores, own], axis=-1))
        out = T.matmul(w[..., :n_shared], vs) + w[..., n_shared:] * vc
    out = T.matmul(merge_heads(out), p["wo"])
    return (out, w) if return_weights else out


def output_logits(h_tilde, p: Mapping[str, Tensor]) -> Tensor:
    """Next-token distributions ``softmax(h W_p + b_p)``, one row per position."""
    return T.softmax_rows(T.linear(T._lift(h_tilde), p["w"], p["b"]))
