"""A small dense-tensor library with reverse-mode automatic differentiation.

Tensors wrap a numpy array. Every differentiable op records its parents and a
closure mapping the output gradient to one gradient per parent. Nodes carry a
creation index, so sorting reachable nodes by that index (descending) is a
valid reverse topological order; the graph is ordered by construction.

Gradients of leaves accumulate with ``+=``. A tensor that participates k times
in a graph (a weight-tied layer applied k times, say) ends up holding the sum
of its k single-use gradients, which is all recurrent stacking needs.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import NumericalError, OutOfVocabularyError, ParameterError, ShapeError

DTYPES = {"float32": np.float32, "float64": np.float64}

_counter = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Rng:
    """Seeded random stream.

    The generator is numpy's PCG64 (``np.random.Generator(np.random.PCG64)``)
    seeded through ``SeedSequence``; its output is fixed across platforms for a
    given seed. ``fork`` derives an independent child stream from a tuple of
    integer keys, e.g. one per training step and dropout site.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys])
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def fork(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def random(self, shape, dtype=np.float64):
        return self.generator.random(shape, dtype=dtype)

    def normal(self, shape, scale=1.0):
        return self.generator.normal(0.0, scale, size=shape)

    def uniform(self, shape, low, high):
        return self.generator.uniform(low, high, size=shape)

    def integers(self, low, high, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n):
        return self.generator.permutation(n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._order = next(_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        backward(self, grad)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._order = next(_counter)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- graph walk


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, outputs first."""
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen[id(t)] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t._order, reverse=True)


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; zero them between steps.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    pending = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in topological_order(loss):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {ad.shape} and {bd.shape}")
    if bd.ndim == 2 and ad.ndim > 2:
        # [..., m, k] @ [k, n]: fold leading axes into one GEMM each way
        k, n = bd.shape
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(lead + (n,))

        def bw(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

    else:
        try:
            out = ad @ bd
        except ValueError as exc:
            raise ShapeError(f"matmul: cannot broadcast shapes {ad.shape} and {bd.shape}") from exc

        def bw(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
            return ga, gb

    return _result(out, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    inv = a.dtype.type(1.0 / n)
    return _result(
        np.asarray(a.data.mean(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g * inv, shape).copy(),)
    )


# ---------------------------------------------------------------- neural ops


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    nd = x.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    axis = axis % nd
    moved = np.moveaxis(x.data, axis, -1)
    lead = moved.shape
    flat = np.ascontiguousarray(moved.reshape(-1, lead[-1]))
    if np.isnan(flat.max(axis=1)).any():
        raise NumericalError("softmax: NaN in input")
    y = kernels.softmax_fwd(flat)

    def bw(g):
        gf = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(-1, lead[-1]))
        dx = kernels.softmax_bwd(y, gf)
        return (np.moveaxis(dx.reshape(lead), -1, axis),)

    return _result(np.moveaxis(y.reshape(lead), -1, axis), (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},)")
    if eps <= 0:
        raise ParameterError("layer_norm: eps must be positive")
    shape = x.shape
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = kernels.layer_norm_fwd(flat, gain.data, bias.data, eps)

    def bw(g):
        dx, dgain, dbias = kernels.layer_norm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gain.data)
        return dx.reshape(shape), dgain, dbias

    return _result(y.reshape(shape), (x, gain, bias), bw)


def dropout(x: Tensor, p: float, train: bool, rng: Rng | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an Rng")
    keep = rng.random(x.shape, dtype=np.float32) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    v, d = table.shape
    if ids.size and (ids.max() >= v or ids.min() < 0):
        bad = int(ids.max()) if ids.max() >= v else int(ids.min())
        raise OutOfVocabularyError(f"embedding: id {bad} outside table of {v} rows")
    flat_ids = np.ascontiguousarray(ids.reshape(-1))

    def bw(g):
        out = np.zeros_like(table.data)
        kernels.scatter_add_rows(out, flat_ids, np.ascontiguousarray(g.reshape(-1, d)))
        return (out,)

    return _result(table.data[ids], (table,), bw)


def cross_entropy_label_smoothed(logits: Tensor, gold, epsilon: float, pad_id: int) -> Tensor:
    """Mean label-smoothed cross entropy over positions whose gold id is not ``pad_id``.

    The target puts ``1 - epsilon`` on the gold id and ``epsilon / (V - 1)`` on
    every other id.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ParameterError(f"label smoothing must be in [0, 1), got {epsilon}")
    v = logits.shape[-1]
    shape = logits.shape
    gold = np.ascontiguousarray(np.asarray(gold, dtype=np.int64).reshape(-1))
    flat = np.ascontiguousarray(logits.data.reshape(-1, v))
    if gold.shape[0] != flat.shape[0]:
        raise ShapeError(f"cross_entropy: {flat.shape[0]} logit rows vs {gold.shape[0]} gold ids")
    total, count, grad = kernels.smoothed_ce(flat, gold, float(epsilon), int(pad_id))
    if count == 0:
        raise ParameterError("cross_entropy: every position is padding; mean is undefined")
    inv = logits.dtype.type(1.0 / count)

    def bw(g):
        return ((grad * (g * inv)).reshape(shape),)

    return _result(np.asarray(total / count, dtype=logits.dtype), (logits,), bw)


# ---------------------------------------------------------------- verification


def check_gradients(f: Callable[[Tensor], Tensor], x, h: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences of scalar ``f`` at ``x``.

    Runs in float64. ``f`` must be deterministic (freeze any dropout rng by
    re-seeding it inside ``f``).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    f(xt).backward()
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(x0.copy())).item()
            flat[i] = orig - h
            fm = f(Tensor(x0.copy())).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    return relative_error(analytic, numeric)


def relative_error(a, b, floor: float = 1e-8) -> float:
    """max |a-b| / max(max|a|, max|b|, floor): a scale-aware error over a whole array."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)
