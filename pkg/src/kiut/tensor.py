"""Dense float64 tensors with a per-forward-pass gradient tape.

Every differentiable operation in the package is one of the functions in this
module.  A :class:`Tape` is created for one forward pass, parameters are
registered on it with :meth:`Tape.watch`, and :func:`backward` walks the
recorded nodes in reverse to produce gradients.  Tensors that were never
watched (inputs, masks, constants) carry no tape and cost nothing on backward.

GELU uses the tanh approximation::

    gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64
_GELU_C = math.sqrt(2.0 / math.pi)


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinity."""


class Tape:
    """Ordered record of executed operations.

    Node ``k`` stores the node ids of its parents and a closure mapping the
    output gradient to one gradient per parent.  Parents are always recorded
    before their children, so reverse iteration is a valid topological order.
    """

    def __init__(self) -> None:
        self.parents: list[tuple[int | None, ...]] = []
        self.backward_fns: list[Callable | None] = []
        self.shapes: list[tuple[int, ...]] = []
        self.leaves: "OrderedDict[str, int]" = OrderedDict()

    def __len__(self) -> int:
        return len(self.parents)

    def _add(self, shape, parents, fn) -> int:
        self.parents.append(parents)
        self.backward_fns.append(fn)
        self.shapes.append(shape)
        return len(self.parents) - 1

    def watch(self, name: str, value) -> "Tensor":
        if name in self.leaves:
            raise KeyError(f"leaf {name!r} already watched on this tape")
        data = _as_array(value)
        node = self._add(data.shape, (), None)
        self.leaves[name] = node
        return Tensor(data, self, node)

    def watch_all(self, params: Mapping[str, np.ndarray]) -> dict[str, "Tensor"]:
        return {name: self.watch(name, value) for name, value in params.items()}


class Tensor:
    """Immutable dense array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use mul with a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=DTYPE)
    if not np.isfinite(arr).all():
        raise NonFiniteError("tensor data must be finite")
    return arr


def tensor(value) -> Tensor:
    """Untracked constant tensor."""
    return Tensor(_as_array(value))


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = x.tape
    return tape


def _make(out: np.ndarray, inputs: Sequence[Tensor], fn: Callable | None) -> Tensor:
    # a finite sum implies finite entries; only fall back to the full scan otherwise
    if not np.isfinite(out.sum()) and not np.isfinite(out).all():
        raise NonFiniteError("operation produced a non-finite value")
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    parents = tuple(x.node if x.tape is not None else None for x in inputs)
    node = tape._add(out.shape, parents, fn)
    return Tensor(out, tape, node)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    ta, tb = a.tracked, b.tracked

    def fn(g):
        return (unbroadcast(g, sa) if ta else None), (unbroadcast(g, sb) if tb else None)

    return _make(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    ta, tb = a.tracked, b.tracked

    def fn(g):
        return (unbroadcast(g, sa) if ta else None), (-unbroadcast(g, sb) if tb else None)

    return _make(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    ta, tb = a.tracked, b.tracked

    def fn(g):
        return (unbroadcast(g * bd, ad.shape) if ta else None), (unbroadcast(g * ad, bd.shape) if tb else None)

    return _make(ad * bd, (a, b), fn)


def exp(a) -> Tensor:
    a = _lift(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError below
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    if (ad <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a) -> Tensor:
    a = _lift(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _lift(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def gelu(a) -> Tensor:
    """Tanh approximation of GELU; in-place updates keep temporaries few."""
    a = _lift(a)
    x = a.data
    x2 = x * x
    th = x2 * (0.044715 * _GELU_C)
    th += _GELU_C
    th *= x
    np.tanh(th, out=th)
    out = th + 1.0
    out *= x
    out *= 0.5

    def fn(g):
        # 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3 * 0.044715 x^2)
        d = x2 * (3 * 0.044715 * _GELU_C)
        d += _GELU_C
        d *= 1.0 - th * th
        d *= x
        d += th
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return _make(out, (a,), fn)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def activation(kind: str, t, slope: float = 0.2) -> Tensor:
    """Dispatch ``relu``, ``gelu`` or ``leaky_relu`` by name."""
    if kind == "relu":
        return relu(t)
    if kind == "gelu":
        return gelu(t)
    if kind == "leaky_relu":
        return leaky_relu(t, slope)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's batch semantics on leading axes."""
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def fn(g):
        ga = gb = None
        if a.tracked:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.tracked:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), fn)


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _lift(a)
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _lift(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = _lift(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g: (unbroadcast(g, old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, fn)


def getitem(a, index) -> Tensor:
    a = _lift(a)
    shape = a.shape

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in
                (index if isinstance(index, tuple) else (index,)))

    def fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.data[index]), (a,), fn)


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    table = _lift(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("row id out of range")
    shape = table.shape

    def fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _make(table.data[ids], (table,), fn)


def pick(a, ids) -> Tensor:
    """Select ``a[..., ids[...]]`` along the last axis."""
    a = _lift(a)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise ValueError("pick ids must match the leading shape")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[-1]):
        raise IndexError("id out of range")
    idx = ids[..., None]
    shape = a.shape

    def fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _make(np.take_along_axis(a.data, idx, axis=-1)[..., 0], (a,), fn)


# ---------------------------------------------------------------- fused layers


def softmax_rows(t, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` is True where an entry is kept."""
    t = _lift(t)
    x = t.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row is fully masked")
        x = np.where(mask, x, -np.inf)
    out = x - x.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def fn(g):
        go = g * out
        go -= out * go.sum(axis=-1, keepdims=True)
        return (go,)

    return _make(out, (t,), fn)


def attention(q, k, v, bias=None, mask=None, scale: float = 1.0) -> tuple[Tensor, np.ndarray]:
    """Fused ``softmax(scale * q k^T + bias, mask) v`` over the last two axes.

    Returns the output tensor and the (untracked) attention weights.  The
    result equals the composition of :func:`matmul`, :func:`add` and
    :func:`softmax_rows`; fusing keeps a single tape node per call.
    """
    q, k, v = _lift(q), _lift(k), _lift(v)
    inputs = [q, k, v]
    if bias is not None:
        bias = _lift(bias)
        inputs.append(bias)
    qd, kd, vd = q.data, k.data, v.data
    s = qd @ np.swapaxes(kd, -1, -2)
    if scale != 1.0:
        s *= scale
    if bias is not None:
        s += bias.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row is fully masked")
        s = np.where(mask, s, -np.inf)
    s -= s.max(axis=-1, keepdims=True)
    w = np.exp(s, out=s)
    w /= w.sum(axis=-1, keepdims=True)
    out = w @ vd

    def fn(g):
        gv = unbroadcast(np.swapaxes(w, -1, -2) @ g, vd.shape) if v.tracked else None
        ds = g @ np.swapaxes(vd, -1, -2)
        ds -= (ds * w).sum(axis=-1, keepdims=True)
        ds *= w
        gb = unbroadcast(ds, bias.shape) if bias is not None and bias.tracked else None
        if scale != 1.0:
            ds = ds * scale  # not in place: gb may alias ds
        gq = unbroadcast(ds @ kd, qd.shape) if q.tracked else None
        gk = unbroadcast(np.swapaxes(ds, -1, -2) @ qd, kd.shape) if k.tracked else None
        return (gq, gk, gv, gb)

    return _make(out, inputs, fn), w


def layer_norm(t, gain, bias, eps: float = 1e-5) -> Tensor:
    t, gain, bias = _lift(t), _lift(gain), _lift(bias)
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = t.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm expects gain/bias of shape ({d},)")
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def fn(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (t, gain, bias), fn)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- autodiff


def backward(tape: Tape, loss: Tensor, names: Iterable[str] | None = None) -> "OrderedDict[str, np.ndarray]":
    """Gradients of a scalar ``loss`` w.r.t. every watched leaf.

    Results follow watch order (or ``names`` if given); leaves that do not
    influence the loss get zeros.
    """
    if loss.tape is not tape or loss.node is None:
        raise ValueError("loss was not produced on this tape")
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError("loss must be a scalar")
    grads: list[np.ndarray | None] = [None] * (loss.node + 1)
    grads[loss.node] = np.ones(tape.shapes[loss.node], dtype=DTYPE)
    for k in range(loss.node, -1, -1):
        g = grads[k]
        fn = tape.backward_fns[k]
        if g is None or fn is None:
            continue
        parents = tape.parents[k]
        outs = fn(g)
        for p, gp in zip(parents, outs):
            if p is None or gp is None:
                continue
            # closures never write into the arrays they return, so no copy is needed
            grads[p] = gp if grads[p] is None else grads[p] + gp
        if k != loss.node:
            grads[k] = None
    order = list(tape.leaves) if names is None else list(names)
    result: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name in order:
        node = tape.leaves[name]
        g = grads[node] if node <= loss.node else None
        result[name] = np.zeros(tape.shapes[node], dtype=DTYPE) if g is None else g
    return result


def value_and_grad(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, np.ndarray]):
    """Evaluate ``f`` on freshly watched ``params`` and return (value, grads)."""
    tape = Tape()
    watched = tape.watch_all(params)
    loss = f(watched)
    return loss.item(), backward(tape, loss, names=params.keys())


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    per_param: bool = False,
):
    """Compare tape gradients with central differences.

    The error for one parameter tensor is ``|g - g_fd| / max(|g|, |g_fd|)``
    using Euclidean norms over the checked entries.  ``max_entries`` limits
    how many randomly chosen entries of each tensor are perturbed.  Returns
    the maximum over parameters, or the per-parameter dict if ``per_param``.
    """
    if not 0 < step <= 1e-2:
        raise ValueError("step must lie in (0, 1e-2]")
    rng = np.random.default_rng(seed)
    base = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}
    value, grads = value_and_grad(f, base)
    if not math.isfinite(value):
        raise NonFiniteError("objective is not finite")

    def evaluate(p):
        out = f({k: Tensor(v) for k, v in p.items()}).item()
        if not math.isfinite(out):
            raise NonFiniteError("objective is not finite")
        return out

    errors: dict[str, float] = {}
    for name, arr in base.items():
        flat_idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        fd = np.empty(len(flat_idx))
        for n, i in enumerate(flat_idx):
            idx = np.unravel_index(i, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + step
            hi = evaluate(base)
            arr[idx] = orig - step
            lo = evaluate(base)
            arr[idx] = orig
            fd[n] = (hi - lo) / (2 * step)
        errors[name] = _rel_err(grads[name].reshape(-1)[flat_idx], fd)
    if per_param:
        return errors
    return max(errors.values(), default=0.0)


class ParamStore(OrderedDict):
    """Ordered ``name -> ndarray`` map of trainable parameters."""

    def __setitem__(self, key, value):
        if key in self:
            raise KeyError(f"parameter {key!r} registered twice")
        super().__setitem__(key, _as_array(value))

    def replace(self, key: str, value) -> None:
        if key not in self:
            raise KeyError(key)
        super().__setitem__(key, np.asarray(value, dtype=DTYPE))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.items():
            out[k] = v.copy()
        return out

    def num_scalars(self) -> int:
        return int(np.sum([v.size for v in self.values()]))


def subset(params: Mapping, prefix: str) -> dict:
    """View of the entries under ``prefix.`` with the prefix stripped."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}
