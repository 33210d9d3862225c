"""Region-relationship encoder: a pre-norm stack of RRSA layers.

Parameter names (relative to the ``enc`` prefix)::

    geo.fc_w [4, d_g], geo.fc_b [d_g]          shared geometry FC
    {l}.w_g [n_heads, d_g]                     per-layer geometry vector
    {l}.attn.{wq,wk,wv,wo,mem_k,mem_v,mem_bias}
    {l}.ln1.{g,b}, {l}.ln2.{g,b}
    {l}.mlp.{w0,b0,w1,b1}
"""

from __future__ import annotations

from functools import lru_cache
from typing import Mapping

import numpy as np

from . import tensor as T
from .attention import extrinsic_from_embedding, geometry_embedding, region_geometry, relative_geometry, rrsa
from .tensor import Tensor, subset


@lru_cache(maxsize=16)
def grid_relative_geometry(grid_w: int, grid_h: int, epsilon: float = 1e-3) -> np.ndarray:
    rg = relative_geometry(region_geometry(grid_w, grid_h), epsilon)
    rg.setflags(write=False)
    return rg


def project_features(raw, params: Mapping[str, Tensor]) -> Tensor:
    """Trainable affine stand-in for the CNN backbone: ``[.., S, d_in] -> [.., S, d]``."""
    return T.linear(T._lift(raw), params["backbone.w"], params["backbone.b"])


def mlp(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return T.linear(T.gelu(T.linear(x, p["w0"], p["b0"])), p["w1"], p["b1"])


def encoder_layer(X, ER, p: Mapping[str, Tensor], n_heads: int) -> Tensor:
    X = T._lift(X)
    h = X + rrsa(T.layer_norm(X, p["ln1.g"], p["ln1.b"]), ER, subset(p, "attn"), n_heads)
    return h + mlp(T.layer_norm(h, p["ln2.g"], p["ln2.b"]), subset(p, "mlp"))


def layer_biases(config, params: Mapping[str, Tensor]) -> list:
    """Extrinsic-relationship bias for every layer (None entries when ER is off)."""
    if not config.use_er:
        return [None] * config.n_layers
    rg = grid_relative_geometry(config.grid_w, config.grid_h, config.geometry_eps)
    emb = geometry_embedding(rg, params["enc.geo.fc_w"], params["enc.geo.fc_b"])
    return [extrinsic_from_embedding(emb, params[f"enc.{l}.w_g"]) for l in range(config.n_layers)]


def encode(features, config, params: Mapping[str, Tensor]) -> list[Tensor]:
    """Run all layers on projected features, keeping every layer's output."""
    X = T._lift(features)
    if X.shape[-2] != config.num_regions:
        raise ValueError(f"expected {config.num_regions} regions, got {X.shape[-2]}")
    outputs = []
    for l, er in enumerate(layer_biases(config, params)):
        X = encoder_layer(X, er, subset(params, f"enc.{l}"), config.n_heads)
        outputs.append(X)
    return outputs
