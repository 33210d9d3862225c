import math

import numpy as np
import pytest

from kiut import tensor as T
from kiut.attention import multi_head_attention
from kiut.distiller import build_injected, distill, distill_signals, output_logits


def params(rng, d):
    return {k: rng.normal(scale=0.5, size=(d, d)) for k in ("wq", "wk", "wv", "wo")}


def loop_distill(h, X, C, W, p, n):
    """Row i: per-head softmax attention of h[i] over [X; C; W[i]], concatenated and projected."""
    d = h.shape[1]
    dn = d // n
    out = np.zeros_like(h)
    for i in range(h.shape[0]):
        F = np.vstack([X, C, W[i:i + 1]])
        heads = []
        for hd in range(n):
            c = slice(hd * dn, (hd + 1) * dn)
            q = h[i] @ p["wq"][:, c]
            k = F @ p["wk"][:, c]
            v = F @ p["wv"][:, c]
            s = k @ q / math.sqrt(dn)
            w = np.exp(s - s.max())
            heads.append((w / w.sum()) @ v)
        out[i] = np.concatenate(heads) @ p["wo"]
    return out


def test_build_injected_rows(rng):
    X, C, W = rng.normal(size=(49, 4)), rng.normal(size=(8, 4)), rng.normal(size=(3, 4))
    blocks = build_injected(X, C, W)
    assert len(blocks) == 3 and all(b.shape == (58, 4) for b in blocks)
    assert np.array_equal(blocks[0].data[:-1], blocks[2].data[:-1])
    assert not np.array_equal(blocks[0].data[-1], blocks[2].data[-1])
    off = build_injected(X, C, W, use_clinical=False, use_contextual=False)
    assert all(np.array_equal(b.data, X) for b in off)
    assert build_injected(X, C, W, use_clinical=False)[0].shape == (50, 4)
    with pytest.raises(ValueError):
        build_injected(X, rng.normal(size=(8, 5)), W)


def test_distill_matches_loop_oracle(rng):
    d, n = 4, 2
    p = params(rng, d)
    h, X, C, W = rng.normal(size=(2, d)), rng.normal(size=(3, d)), rng.normal(size=(2, d)), rng.normal(size=(2, d))
    ref = loop_distill(h, X, C, W, p, n)
    assert np.abs(distill(h, build_injected(X, C, W), p, n).data - ref).max() < 1e-12
    assert np.abs(distill_signals(h, X, C, W, p, n).data - ref).max() < 1e-12


@pytest.mark.parametrize("use_clinical,use_contextual", [(True, True), (True, False), (False, True), (False, False)])
def test_batched_path_equals_literal_path(rng, use_clinical, use_contextual):
    d, n, t = 6, 3, 5
    p = params(rng, d)
    h, X = rng.normal(size=(t, d)), rng.normal(size=(7, d))
    C, W = rng.normal(size=(4, d)), rng.normal(size=(t, d))
    literal = distill(h, build_injected(X, C, W, use_clinical, use_contextual), p, n).data
    batched = distill_signals(h, X, C if use_clinical else None, W if use_contextual else None, p, n).data
    assert np.abs(literal - batched).max() < 1e-12


def test_single_row_block_is_value_path(rng):
    d = 4
    p = params(rng, d)
    r = rng.normal(size=(1, d))
    out = distill(rng.normal(size=(3, d)), [T.tensor(r)] * 3, p, 2).data
    np.testing.assert_allclose(out, np.repeat(r @ p["wv"] @ p["wo"], 3, axis=0), atol=1e-13)


def test_toggles_off_is_cross_attention(rng):
    d, n = 4, 2
    p = params(rng, d)
    h, X = rng.normal(size=(2, 5, d)), rng.normal(size=(2, 6, d))
    out = distill_signals(h, X, None, None, p, n).data
    ref = multi_head_attention(h, X, p, n).data
    assert np.abs(out - ref).max() < 1e-12


def test_distill_length_mismatch(rng):
    p = params(rng, 4)
    with pytest.raises(ValueError):
        distill(rng.normal(size=(3, 4)), [T.tensor(rng.normal(size=(2, 4)))] * 2, p, 2)


def test_output_logits(rng):
    h = rng.normal(size=(3, 4))
    uni = output_logits(h, {"w": np.zeros((4, 7)), "b": np.zeros(7)}).data
    np.testing.assert_allclose(uni, np.full((3, 7), 1 / 7), atol=1e-15)
    p = {"w": rng.normal(size=(4, 7)), "b": rng.normal(size=7)}
    probs = output_logits(h, p).data
    assert np.abs(probs.sum(-1) - 1).max() < 1e-9
    shifted = output_logits(h, {"w": p["w"], "b": p["b"] + 3.0}).data
    assert np.array_equal(probs.argmax(-1), shifted.argmax(-1))


def test_distiller_gradients(rng):
    d, n = 4, 2
    prm = params(rng, d)
    prm.update(h=rng.normal(size=(3, d)), X=rng.normal(size=(4, d)), C=rng.normal(size=(2, d)),
               W=rng.normal(size=(3, d)), w=rng.normal(size=(d, 5)), b=rng.normal(size=5))
    tgt = rng.random((3, 5))

    def f(P):
        h = distill_signals(P["h"], P["X"], P["C"], P["W"], P, n)
        return T.sum(T.log(output_logits(h, P)) * tgt)

    assert T.grad_check(f, prm) < 1e-6
