"""Shared small configurations for tests."""

import numpy as np

from kiut.model import ModelConfig, init_params


def tiny_config(**overrides) -> ModelConfig:
    base = dict(grid_w=3, grid_h=3, d_in=5, d_model=8, n_layers=2, n_heads=2, n_memory=1, d_geometry=6,
                vocab_size=12, max_len=10, n_symptoms=3)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed=0, **overrides):
    cfg = tiny_config(**overrides)
    return cfg, init_params(cfg, seed)


def random_tokens(rng, batch, t, vocab):
    toks = rng.integers(4, vocab, size=(batch, t))
    toks[:, 0] = 1
    return toks


def features(rng, cfg, batch=None):
    shape = (cfg.num_regions, cfg.d_in) if batch is None else (batch, cfg.num_regions, cfg.d_in)
    return rng.normal(size=shape)


# criterion number -> "criterion N: PASS/FAIL ..." line, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[n])
