"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records its parents and a closure mapping the
output cotangent to per-parent cotangents. ``backward`` replays the recorded
nodes reachable from a scalar loss in reverse recording order.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
import zlib
from typing import Callable, Sequence

import numpy as np

from .exceptions import ConfigError, ContractError, DataError, DomainError, ShapeError

_order = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Suspend tape recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._order = next(_order)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def mT(self) -> "Tensor":
        return swap_last(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators -----------------------------------------------------
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
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad and id(p) not in nodes)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in sorted(nodes.values(), key=lambda n: n._order, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _broadcast_check(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "div")
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape),
                            unbroadcast(-g * out / b.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def elem_pow(base: Tensor, exponent: Tensor) -> Tensor:
    """Elementwise ``base ** exponent`` for strictly positive bases.

    Computed as ``exp(exponent * ln(base))`` so real-valued, learnable
    exponents are supported.
    """
    base, exponent = as_tensor(base), as_tensor(exponent)
    _broadcast_check(base.data, exponent.data, "elem_pow")
    if np.any(base.data <= 0):
        raise DomainError(f"elem_pow base must be > 0 (min {base.data.min():.3g})")
    ln_b = np.log(base.data)
    out = np.exp(exponent.data * ln_b)

    def bw(g):
        return (unbroadcast(g * out * exponent.data / base.data, base.shape),
                unbroadcast(g * out * ln_b, exponent.shape))

    return _node(out, (base, exponent), bw)


def relu(x: Tensor) -> Tensor:
    keep = x.data >= 0
    return _node(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data >= 0
    scale = np.where(pos, 1.0, slope)
    return _node(x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    return _node(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def cumsum(x: Tensor, axis: int) -> Tensor:
    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _node(np.cumsum(x.data, axis=axis), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    return _node(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    n = x.shape[axis]
    if n % sections:
        raise ShapeError(f"split: extent {n} not divisible into {sections}")
    width = n // sections
    ax = axis % x.ndim
    out = []
    for i in range(sections):
        index = [slice(None)] * x.ndim
        index[ax] = slice(i * width, (i + 1) * width)
        index = tuple(index)

        def bw(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        out.append(_node(x.data[index], (x,), bw))
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; gradient scatter-adds into the same rows."""
    ids = np.asarray(ids, dtype=np.int64)
    bad = np.argwhere((ids < 0) | (ids >= table.shape[0]))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise DataError(f"token id {int(ids[pos])} at position {pos} outside table of {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _node(table.data[ids], (table,), bw)


def pick(x: Tensor, idx) -> Tensor:
    """Select ``x[..., idx[...]]`` along the last axis."""
    idx = np.asarray(idx, dtype=np.int64)[..., None]

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _node(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), bw)


# ---------------------------------------------------------------------------
# normalisation and probability
# ---------------------------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _node(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), bw)


def normalize_lastdim(x: Tensor, eps: float) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True)
                       - y * (g * y).mean(axis=-1, keepdims=True)),)

    return _node(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    return normalize_lastdim(x, eps) * gain + bias


def dropout(x: Tensor, rate: float, training: bool, rng: "Rng | None" = None) -> Tensor:
    """Inverted dropout; identity when not training or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------

def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


class Rng:
    """Counter-based (Philox) stream addressed by a seed and a name path.

    ``Rng(seed).child("dropout", step)`` always yields the same stream, so any
    stochastic site can be replayed without carrying generator state around.
    ``draws`` counts sampling calls.
    """

    def __init__(self, seed: int, *path):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(_key(p) for p in self.path))
        self._gen = np.random.Generator(np.random.Philox(ss))
        self.draws = 0

    def child(self, *names) -> "Rng":
        return Rng(self.seed, *self.path, *names)

    def random(self, shape) -> np.ndarray:
        self.draws += 1
        return self._gen.random(shape)

    def normal(self, scale: float, shape) -> np.ndarray:
        self.draws += 1
        return self._gen.normal(0.0, scale, shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        self.draws += 1
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        self.draws += 1
        return self._gen.permutation(n)

