"""Post-norm transformer decoder with pluggable encoder-to-decoder routing."""

from __future__ import annotations

import enum
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .attention import causal_mask, multi_head_attention
from .tensor import Tensor, subset


class ConnectionSchema(str, enum.Enum):
    U = "u"
    LAST = "last"
    ONE_TO_ONE = "one-to-one"


def plan_connection(schema: ConnectionSchema | str, n_layers: int) -> list[int]:
    """1-based encoder layer feeding each decoder layer.

    U routes encoder layer i to decoder layer N - i + 1, i.e. decoder layer i
    reads encoder layer N - i + 1.
    """
    schema = ConnectionSchema(schema)
    if n_layers < 1:
        raise ValueError("need at least one layer")
    if schema is ConnectionSchema.U:
        return [n_layers - i + 1 for i in range(1, n_layers + 1)]
    if schema is ConnectionSchema.LAST:
        return [n_layers] * n_layers
    return list(range(1, n_layers + 1))


def positional_encoding(length: int, d: int, denom: int | None = None) -> np.ndarray:
    """Sinusoidal table ``[length, d]``: sin on even columns, cos on odd.

    Column pair ``(2k, 2k+1)`` uses frequency ``1 / 10000 ** (2k / denom)``;
    ``denom`` defaults to ``d``.  The decoder passes the per-head width.
    """
    if d % 2:
        raise ValueError("positional encoding width must be even")
    denom = d if denom is None else denom
    pos = np.arange(length, dtype=float)[:, None]
    two_k = np.arange(0, d, 2, dtype=float)[None, :]
    angle = pos / np.power(10000.0, two_k / denom)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def add_norm(x: Tensor, sub: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    return T.layer_norm(x + sub, p[f"{name}.g"], p[f"{name}.b"])


def ffn(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return T.linear(T.relu(T.linear(x, p["w0"], p["b0"])), p["w1"], p["b1"])


def decoder_layer(H, X_hat, p: Mapping[str, Tensor], n_heads: int, mask=None) -> Tensor:
    H = T._lift(H)
    if mask is None:
        mask = causal_mask(H.shape[-2])
    a = add_norm(H, multi_head_attention(H, H, subset(p, "self"), n_heads, mask=mask), p, "ln1")
    b = add_norm(a, multi_head_attention(a, X_hat, subset(p, "cross"), n_heads), p, "ln2")
    return add_norm(b, ffn(b, subset(p, "ffn")), p, "ln3")


def embed_tokens(tokens, table: Tensor, max_len: int, n_heads: int) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    t = tokens.shape[-1]
    if t == 0:
        raise ValueError("empty token sequence")
    if t > max_len:
        raise ValueError(f"sequence length {t} exceeds max_len {max_len}")
    d = table.shape[-1]
    pe = positional_encoding(t, d, denom=d // n_heads)
    return T.take_rows(table, tokens) + pe


def decode_hidden(tokens, enc_outputs: Sequence[Tensor], plan: Sequence[int], params: Mapping[str, Tensor],
                  config) -> Tensor:
    """Final decoder hidden states ``[.., t, d]`` for every prefix position."""
    if len(plan) != config.n_layers or any(not 1 <= r <= len(enc_outputs) for r in plan):
        raise ValueError("connection plan does not match the encoder outputs")
    H = embed_tokens(tokens, params["dec.embed"], config.max_len, config.n_heads)
    mask = causal_mask(H.shape[-2])
    for i, src in enumerate(plan):
        H = decoder_layer(H, enc_outputs[src - 1], subset(params, f"dec.{i}"), config.n_heads, mask)
    return H
