"""Reverse-mode automatic differentiation over numpy arrays.

Operations executed inside an active :class:`GradientTape` are appended to it
in creation order whenever one of their inputs requires a gradient.
:func:`backward` replays the tape in reverse and leaves gradients on the
leaf tensors.  Outside of a tape every op is a plain numpy computation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MASK_FILL = -1e9   # additive mask value for callers that build score biases

_FLOAT_TYPES = (np.float32, np.float64)
_TAPES: list["GradientTape"] = []


class DimensionError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class EmptyReductionError(ValueError):
    pass


class RankError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradientTape:
    """Creation-ordered record of differentiable operations.

    A tape belongs to one training thread. Use it as a context manager; ops
    run while it is the innermost active tape are recorded onto it.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "GradientTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        seen: set[int] = set()
        out = []
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t.tape_id is None and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


class no_grad:
    """Suspend recording on every active tape."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward_fn) -> Tensor:
    result = Tensor(out)
    if _TAPES and any(t.requires_grad for t in inputs):
        tape = _TAPES[-1]
        result.requires_grad = True
        result.tape_id = len(tape.nodes)
        tape.nodes.append(Node(op, inputs, result, backward_fn))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, tape: GradientTape) -> dict[int, np.ndarray]:
    """Replay ``tape`` in reverse creation order starting from scalar ``loss``.

    Every requires-grad leaf on the tape gets ``.grad`` overwritten (zeros if
    the loss does not depend on it).  Returns the gradients keyed by
    ``id(leaf)``.  The tape is left untouched so the call can be repeated.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.backward_fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = ig if prev is None else prev + ig
    out = {}
    for leaf in tape.leaves():
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else g.astype(leaf.dtype, copy=False)
        out[id(leaf)] = leaf.grad
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record("log", (a,), np.log(ad), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _record("gelu", (a,), out, bw)


# ---------------------------------------------------------------- reductions / shape

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), a.data.sum(axis=axis, keepdims=keepdims), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _record("mean", (a,), out, bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def _scatter_rows(ids: np.ndarray, g: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``g`` (one per id) into an ``n``-row array."""
    rows = g.reshape(len(ids), -1)
    if n * len(ids) <= 4_000_000:
        onehot = np.zeros((n, len(ids)), dtype=g.dtype)
        onehot[ids, np.arange(len(ids))] = 1.0
        out = onehot @ rows
    else:
        out = np.zeros((n, rows.shape[1]), dtype=g.dtype)
        np.add.at(out, ids, rows)
    return out.reshape((n,) + g.shape[1:])


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)
    row_gather = isinstance(idx, np.ndarray) and idx.ndim == 1 and idx.dtype.kind in "iu"

    def bw(g):
        if row_gather:
            return (_scatter_rows(idx, g, shape[0]),)
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record("getitem", (a,), a.data[idx], bw)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"ids outside [0, {table.shape[0]})")
    n, dim = table.shape[0], table.shape[1:]

    def bw(g):
        return (_scatter_rows(ids.reshape(-1), g.reshape((-1,) + dim), n),)

    return _record("take_rows", (table,), table.data[ids], bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents do not broadcast: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading axes so both directions run as single 2-D GEMMs
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _record("matmul", (a, b), (a2 @ bd).reshape(lead + (bd.shape[1],)), bw2)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, bw)


# ---------------------------------------------------------------- normalisers

def softmax(x: Tensor, axis: int = -1, allow: np.ndarray | None = None) -> Tensor:
    """Stabilised softmax; ``allow`` (broadcastable bool) masks positions to exactly 0.

    A row whose every position is disallowed or ``-inf`` is an error.
    """
    data = x.data
    if allow is not None:
        data = np.where(allow, data, -np.inf)
    mx = data.max(axis=axis, keepdims=True)
    if np.isneginf(mx).any():
        raise DegenerateRowError("softmax row has every position masked")
    e = np.exp(data - mx)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), out, bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    data = x.data
    shifted = data - data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (x,), out, bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", (x, gain, bias), out, bw)


def cross_entropy_logits(logits: Tensor, targets, ignore_index: int = -100,
                         reduction: str = "mean") -> Tensor:
    """Negative log-softmax probability of ``targets`` over non-ignored positions.

    ``reduction`` is ``"mean"`` (default) or ``"sum"``.
    """
    c = logits.shape[-1]
    flat = logits.data.reshape(-1, c)
    tgt = np.asarray(targets).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise DimensionError(f"targets shape {np.shape(targets)} does not match logits {logits.shape}")
    valid = tgt != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise EmptyReductionError("every target position is ignored")
    bad = valid & ((tgt < 0) | (tgt >= c))
    if bad.any():
        raise ValueError(f"target ids outside [0, {c})")
    safe = np.where(valid, tgt, 0)
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    picked = logp[np.arange(len(safe)), safe] * valid
    denom = n if reduction == "mean" else 1
    out = np.asarray(-picked.sum() / denom, dtype=logits.dtype)
    shape = logits.shape

    def bw(g):
        p = np.exp(logp)
        p[np.arange(len(safe)), safe] -= 1.0
        p *= valid[:, None] * (g / denom)
        return (p.reshape(shape),)

    return _record("cross_entropy", (logits,), out, bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _record("dropout", (x,), x.data * keep, lambda g: (g * keep,))
