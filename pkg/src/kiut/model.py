"""Model configuration, parameter initialisation, full forward pass and greedy decoding."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .corpus import BOS, EOS, PAD, UNK  # noqa: F401
from .attention import merge_heads, scaled_dot_attention, split_heads
from .decoder import ConnectionSchema, add_norm, decode_hidden, ffn, plan_connection, positional_encoding
from .distiller import distill_signals, output_logits
from .encoder import encode, project_features
from .knowledge import clinical_signal, contextual_signal
from .tensor import ParamStore, Tensor, subset


@dataclass
class ModelConfig:
    grid_w: int = 7
    grid_h: int = 7
    d_in: int = 16
    d_model: int = 32
    n_layers: int = 3
    n_heads: int = 2
    n_memory: int = 4
    d_geometry: int = 64
    vocab_size: int = 64
    max_len: int = 40
    n_symptoms: int = 8
    schema: str = "u"
    use_er: bool = True
    use_clinical: bool = True
    use_contextual: bool = True
    geometry_eps: float = 1e-3
    gat_slope: float = 0.2
    adjacency: list = field(default_factory=list)

    def __post_init__(self):
        ConnectionSchema(self.schema)
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("per-head width must be even for the positional encoding")
        if min(self.grid_w, self.grid_h, self.n_layers, self.n_heads, self.n_symptoms) < 1:
            raise ValueError("sizes must be positive")
        if self.n_memory < 0:
            raise ValueError("n_memory must be >= 0")
        if not self.adjacency:
            self.adjacency = np.eye(self.n_symptoms, dtype=int).tolist()
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.shape != (self.n_symptoms, self.n_symptoms):
            raise ValueError("adjacency must be n_symptoms x n_symptoms")
        if not (adj == adj.T).all() or not adj.diagonal().all():
            raise ValueError("adjacency must be symmetric with self-loops")

    @property
    def num_regions(self) -> int:
        return self.grid_w * self.grid_h

    @property
    def plan(self) -> list[int]:
        return plan_connection(self.schema, self.n_layers)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["adjacency"] = np.asarray(self.adjacency, dtype=int).tolist()
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- initialisation


def _xavier(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def _attention_params(store, rng, prefix, d):
    for name in ("wq", "wk", "wv", "wo"):
        store[f"{prefix}.{name}"] = _xavier(rng, d, d)


def _layer_norm_params(store, prefix, d):
    store[f"{prefix}.g"] = np.ones(d)
    store[f"{prefix}.b"] = np.zeros(d)


def _two_layer(store, rng, prefix, d, hidden):
    store[f"{prefix}.w0"] = _xavier(rng, d, hidden)
    store[f"{prefix}.b0"] = np.zeros(hidden)
    store[f"{prefix}.w1"] = _xavier(rng, hidden, d)
    store[f"{prefix}.b1"] = np.zeros(d)


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    """Xavier-uniform projections; normal(0, 1/sqrt(d)) embeddings and memory slots."""
    rng = np.random.default_rng(seed)
    d, V, K = config.d_model, config.vocab_size, config.n_symptoms
    sigma = 1.0 / math.sqrt(d)
    p = ParamStore()
    p["backbone.w"] = _xavier(rng, config.d_in, d)
    p["backbone.b"] = np.zeros(d)
    if config.use_er:
        p["enc.geo.fc_w"] = _xavier(rng, 4, config.d_geometry)
        p["enc.geo.fc_b"] = np.zeros(config.d_geometry)
    for l in range(config.n_layers):
        pre = f"enc.{l}"
        if config.use_er:
            p[f"{pre}.w_g"] = rng.normal(0.0, 1.0 / math.sqrt(config.d_geometry), (config.n_heads, config.d_geometry))
        _attention_params(p, rng, f"{pre}.attn", d)
        if config.n_memory:
            p[f"{pre}.attn.mem_k"] = rng.normal(0.0, sigma, (config.n_memory, d))
            p[f"{pre}.attn.mem_v"] = rng.normal(0.0, sigma, (config.n_memory, d))
            p[f"{pre}.attn.mem_bias"] = np.zeros((config.n_heads, config.num_regions, config.n_memory))
        _layer_norm_params(p, f"{pre}.ln1", d)
        _layer_norm_params(p, f"{pre}.ln2", d)
        _two_layer(p, rng, f"{pre}.mlp", d, 4 * d)
    p["dec.embed"] = rng.normal(0.0, sigma, (V, d))
    for i in range(config.n_layers):
        pre = f"dec.{i}"
        _attention_params(p, rng, f"{pre}.self", d)
        _attention_params(p, rng, f"{pre}.cross", d)
        _two_layer(p, rng, f"{pre}.ffn", d, 4 * d)
        for ln in ("ln1", "ln2", "ln3"):
            _layer_norm_params(p, f"{pre}.{ln}", d)
    if config.use_contextual:
        p["ctx.embed"] = rng.normal(0.0, sigma, (V, d))
        _attention_params(p, rng, "ctx.attn", d)
    if config.use_clinical:
        p["probe.w"] = _xavier(rng, d, K)
        p["probe.b"] = np.zeros(K)
        p["graph.sf"] = rng.normal(0.0, sigma, (K, d))
        p["gat.w"] = _xavier(rng, d, d)
        p["gat.a"] = _xavier(rng, 2 * d, 1, shape=(2 * d,))
    _attention_params(p, rng, "dist", d)
    p["out.w"] = _xavier(rng, d, V)
    p["out.b"] = np.zeros(V)
    return p


# ---------------------------------------------------------------- forward


@dataclass
class ImageContext:
    """Per-image quantities that do not depend on the generated tokens."""

    enc_outputs: list
    clinical: Tensor | None
    sp: Tensor | None


def encode_image(features, params: Mapping[str, Tensor], config: ModelConfig) -> ImageContext:
    projected = project_features(features, params)
    enc_outputs = encode(projected, config, params)
    clinical = sp = None
    if config.use_clinical:
        clinical, sp = clinical_signal(projected, params, config)
    return ImageContext(enc_outputs, clinical, sp)


def next_token_probs(tokens, image: ImageContext, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Distribution over the next token at every prefix position, ``[.., t, V]``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and tokens.max() >= config.vocab_size:
        raise ValueError("token id outside the vocabulary")
    h = decode_hidden(tokens, image.enc_outputs, config.plan, params, config)
    context = contextual_signal(tokens, params, config) if config.use_contextual else None
    h_tilde = distill_signals(h, image.enc_outputs[-1], image.clinical, context, subset(params, "dist"),
                              config.n_heads)
    return output_logits(h_tilde, subset(params, "out"))


def forward(params: Mapping[str, Tensor], config: ModelConfig, features, tokens):
    """Teacher-forced pass; returns ``(probabilities, symptom probabilities or None)``."""
    image = encode_image(features, params, config)
    return next_token_probs(tokens, image, params, config), image.sp


def constant_params(store: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in store.items()}


class _StepDecoder:
    """Incremental decoding state: per-layer self-attention key/value caches.

    Row ``t`` of a causal stack only depends on rows ``<= t``, so each step
    feeds a single new token through every layer and reuses earlier keys.
    """

    def __init__(self, image: ImageContext, P: Mapping[str, Tensor], config: ModelConfig):
        self.image, self.P, self.config = image, P, config
        d, n = config.d_model, config.n_heads
        self.pe = positional_encoding(config.max_len, d, denom=d // n)
        self.cross = [_project_kv(image.enc_outputs[src - 1], subset(P, f"dec.{i}.cross"), n)
                      for i, src in enumerate(config.plan)]
        self.self_kv: list = [None] * config.n_layers
        self.ctx_kv = None
        self.t = 0

    def step(self, tokens: np.ndarray) -> np.ndarray:
        """Feed one token per sample, return next-token probabilities ``[B, V]``."""
        P, config, n = self.P, self.config, self.config.n_heads
        pe = self.pe[self.t]
        x = T.reshape(T.take_rows(P["dec.embed"], tokens) + pe, (len(tokens), 1, -1))
        for i in range(config.n_layers):
            p = subset(P, f"dec.{i}")
            self.self_kv[i] = _append_kv(self.self_kv[i], _project_kv(x, subset(p, "self"), n))
            a = add_norm(x, _attend(x, self.self_kv[i], subset(p, "self"), n), p, "ln1")
            b = add_norm(a, _attend(a, self.cross[i], subset(p, "cross"), n), p, "ln2")
            x = add_norm(b, ffn(b, subset(p, "ffn")), p, "ln3")
        context = None
        if config.use_contextual:
            e = T.reshape(T.take_rows(P["ctx.embed"], tokens) + pe, (len(tokens), 1, -1))
            self.ctx_kv = _append_kv(self.ctx_kv, _project_kv(e, subset(P, "ctx.attn"), n))
            context = _attend(e, self.ctx_kv, subset(P, "ctx.attn"), n)
        self.t += 1
        h = distill_signals(x, self.image.enc_outputs[-1], self.image.clinical, context, subset(P, "dist"), n)
        return output_logits(h, subset(P, "out")).data[:, 0]


def _project_kv(Y, p, n_heads):
    return (split_heads(T.matmul(Y, p["wk"]), n_heads), split_heads(T.matmul(Y, p["wv"]), n_heads))


def _append_kv(cache, kv):
    if cache is None:
        return kv
    return tuple(T.concat([c, new], axis=-2) for c, new in zip(cache, kv))


def _attend(x, kv, p, n_heads):
    q = split_heads(T.matmul(x, p["wq"]), n_heads)
    return T.matmul(merge_heads(scaled_dot_attention(q, *kv)), p["wo"])


def greedy_decode(params: Mapping[str, np.ndarray], config: ModelConfig, features,
                  max_len: int | None = None, batch_size: int = 64) -> list[list[int]]:
    """Argmax decoding from BOS until EOS or ``max_len`` tokens.

    ``features`` is ``[B, S, d_in]``; returns one id list per sample, without
    BOS and without the terminating EOS.
    """
    max_len = config.max_len if max_len is None else min(max_len, config.max_len)
    features = np.asarray(features, dtype=float)
    if features.ndim == 2:
        features = features[None]
    P = constant_params(params)
    results: list[list[int]] = []
    for start in range(0, len(features), batch_size):
        chunk = features[start:start + batch_size]
        state = _StepDecoder(encode_image(chunk, P, config), P, config)
        B = len(chunk)
        last = np.full(B, BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        out = [[] for _ in range(B)]
        for _ in range(max_len):
            nxt = state.step(last).argmax(axis=-1)
            done |= nxt == EOS
            for b in np.flatnonzero(~done):
                out[b].append(int(nxt[b]))
            if done.all():
                break
            last = np.where(done, PAD, nxt)
        results.extend(out)
    return results
