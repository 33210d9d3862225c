"""Attention primitives: scaled dot-product, multi-head, region geometry and RRSA.

All functions accept an optional batch of leading axes: ``X`` may be
``[a, d]`` or ``[B, a, d]``.  Head-split tensors are laid out ``[..., n, a, d_n]``.

Attention parameter dicts use the keys ``wq``, ``wk``, ``wv`` (``d x d``, the
per-head ``d x d_n`` blocks side by side) and ``wo`` (``d x d``).  RRSA adds
``mem_k``/``mem_v`` (``M_N x d``) and ``mem_bias`` (``n x S x M_N``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, a, d = x.shape
    if d % n_heads:
        raise ValueError(f"d={d} not divisible by {n_heads} heads")
    x = T.reshape(x, (*lead, a, n_heads, d // n_heads))
    k = len(lead)
    return T.transpose(x, (*range(k), k + 1, k, k + 2))


def merge_heads(x: Tensor) -> Tensor:
    *lead, n, a, dn = x.shape
    k = len(lead)
    x = T.transpose(x, (*range(k), k + 1, k, k + 2))
    return T.reshape(x, (*lead, a, n * dn))


def causal_mask(t: int) -> np.ndarray:
    """Boolean ``[t, t]`` mask; position j may attend to positions <= j."""
    return np.tril(np.ones((t, t), dtype=bool))


def scaled_dot_attention(Q, K, V, bias=None, mask=None, return_weights: bool = False):
    """``softmax(Q K^T / sqrt(d_n) + bias, mask) V``."""
    Q, K, V = T._lift(Q), T._lift(K), T._lift(V)
    dn = Q.shape[-1]
    if K.shape[-1] != dn or V.shape[-2] != K.shape[-2]:
        raise ValueError(f"attention shape mismatch: Q{Q.shape} K{K.shape} V{V.shape}")
    out, weights = T.attention(Q, K, V, bias=bias, mask=mask, scale=1.0 / math.sqrt(dn))
    return (out, weights) if return_weights else out


def scaled_dot_attention_unfused(Q, K, V, bias=None, mask=None) -> Tensor:
    """Same as :func:`scaled_dot_attention`, built from separate tape ops."""
    Q, K, V = T._lift(Q), T._lift(K), T._lift(V)
    scores = T.matmul(Q, T.swapaxes(K, -1, -2)) * (1.0 / math.sqrt(Q.shape[-1]))
    if bias is not None:
        scores = scores + bias
    return T.matmul(T.softmax_rows(scores, mask), V)


def multi_head_attention(X, Y, p: Mapping[str, Tensor], n_heads: int, mask=None, bias=None,
                         return_weights: bool = False):
    """Per-head attention of ``X`` over ``Y``, heads concatenated then projected by ``wo``."""
    X, Y = T._lift(X), T._lift(Y)
    d = X.shape[-1]
    if p["wq"].shape[0] != d or Y.shape[-1] != d:
        raise ValueError("model width does not match attention parameters")
    q = split_heads(T.matmul(X, p["wq"]), n_heads)
    k = split_heads(T.matmul(Y, p["wk"]), n_heads)
    v = split_heads(T.matmul(Y, p["wv"]), n_heads)
    out, w = scaled_dot_attention(q, k, v, bias=bias, mask=mask, return_weights=True)
    out = T.matmul(merge_heads(out), p["wo"])
    return (out, w) if return_weights else out


# ------------------------------------------------------------------ geometry


@dataclass(frozen=True)
class RegionBoxes:
    cx: np.ndarray
    cy: np.ndarray
    w: np.ndarray
    h: np.ndarray

    def __len__(self) -> int:
        return len(self.cx)


def region_geometry(grid_w: int, grid_h: int) -> RegionBoxes:
    """Unit grid cells in row-major order.

    Cell ``(r, c)`` spans ``x_min = x_max = c`` and ``y_min = y_max = r``, so
    its center is ``(c, r)`` and its width and height are ``(max - min) + 1 = 1``.
    """
    if grid_w <= 0 or grid_h <= 0:
        raise ValueError("grid must have positive size")
    rows, cols = np.divmod(np.arange(grid_w * grid_h), grid_w)
    x_min = x_max = cols.astype(float)
    y_min = y_max = rows.astype(float)
    return RegionBoxes(
        cx=(x_min + x_max) / 2,
        cy=(y_min + y_max) / 2,
        w=(x_max - x_min) + 1,
        h=(y_max - y_min) + 1,
    )


def relative_geometry(boxes: RegionBoxes, epsilon: float = 1e-3) -> np.ndarray:
    """``[S, S, 4]`` log-ratio features between every pair of boxes.

    The positional terms use ``log((|dx| + eps) / w_i)`` so the diagonal stays finite.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    cx, cy, w, h = boxes.cx, boxes.cy, boxes.w, boxes.h
    dx = np.abs(cx[:, None] - cx[None, :])
    dy = np.abs(cy[:, None] - cy[None, :])
    rg = np.stack(
        [
            np.log((dx + epsilon) / w[:, None]),
            np.log((dy + epsilon) / h[:, None]),
            np.log(w[:, None] / w[None, :]),
            np.log(h[:, None] / h[None, :]),
        ],
        axis=-1,
    )
    return rg


def geometry_embedding(rg, fc_w, fc_b) -> Tensor:
    """Shared affine map ``FC: R^4 -> R^{d_g}`` applied to every pair."""
    return T.linear(T._lift(rg), fc_w, fc_b)


def extrinsic_relationship(rg, fc_w, fc_b, w_g) -> Tensor:
    """``ER[h, i, j] = relu(w_g[h] . FC(rg[i, j]))``, shape ``[n_heads, S, S]``."""
    return extrinsic_from_embedding(geometry_embedding(rg, fc_w, fc_b), w_g)


def extrinsic_from_embedding(emb, w_g) -> Tensor:
    scores = T.matmul(emb, T.swapaxes(T._lift(w_g), -1, -2))  # [S, S, n]
    return T.relu(T.transpose(scores, (2, 0, 1)))


def rrsa(X, ER, p: Mapping[str, Tensor], n_heads: int, m_n: int | None = None,
         return_weights: bool = False):
    """Region-relationship augmented self-attention.

    Keys and values are ``[W_k X; M_k]`` and ``[W_v X; M_v]``; the logits get
    ``[ER, M_I]`` added after the ``1/sqrt(d_n)`` scaling.  ``ER`` may be None
    (no extrinsic bias).
    """
    X = T._lift(X)
    *lead, S, d = X.shape
    mem_k = p.get("mem_k")
    n_mem = 0 if mem_k is None else mem_k.shape[0]
    if m_n is not None and m_n != n_mem:
        raise ValueError(f"expected {m_n} memory slots, parameters hold {n_mem}")
    if ER is not None and tuple(ER.shape) != (n_heads, S, S):
        raise ValueError(f"ER shape {tuple(ER.shape)} does not match ({n_heads}, {S}, {S})")

    q = split_heads(T.matmul(X, p["wq"]), n_heads)
    k = split_heads(T.matmul(X, p["wk"]), n_heads)
    v = split_heads(T.matmul(X, p["wv"]), n_heads)
    bias = ER
    if n_mem:
        dn = d // n_heads
        mk = T.transpose(T.reshape(p["mem_k"], (n_mem, n_heads, dn)), (1, 0, 2))
        mv = T.transpose(T.reshape(p["mem_v"], (n_mem, n_heads, dn)), (1, 0, 2))
        full = (*lead, n_heads, n_mem, dn)
        k = T.concat([k, T.broadcast_to(mk, full)], axis=-2)
        v = T.concat([v, T.broadcast_to(mv, full)], axis=-2)
        er = ER if ER is not None else np.zeros((n_heads, S, S))
        bias = T.concat([er, p["mem_bias"]], axis=-1)
    out, w = scaled_dot_attention(q, k, v, bias=bias, return_weights=True)
    out = T.matmul(merge_heads(out), p["wo"])
    return (out, w) if return_weights else out
