"""Dense tensors with tape-based reverse-mode differentiation.

Tensors wrap numpy arrays. Operations performed while a :class:`Graph` is
active (``with Graph() as g:``) are recorded on it; ``g.backward(loss)`` then
replays the tape in reverse and accumulates ``.grad`` on every leaf tensor
that has ``requires_grad`` set. Outside a graph nothing is recorded, which is
the inference path.

Every forward output and every propagated gradient is checked for NaN/Inf.
"""

from __future__ import annotations

import contextlib
import math
import zlib
from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# precision

_DEFAULT_DTYPE = np.float32


def default_dtype() -> type:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the build-wide float type (f64 for oracle tests)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


# ---------------------------------------------------------------------------
# random streams

def make_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """Counter-based PCG64 stream keyed by ``seed`` plus optional labels.

    String labels are folded through crc32 so the same label maps to the same
    stream on every platform.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for s in stream:
        key.append(zlib.crc32(s.encode()) if isinstance(s, str) else int(s))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


# ---------------------------------------------------------------------------
# multiply-add accounting

class MacCounter:
    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


_COUNTERS: list[MacCounter] = []


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count scalar multiply-adds issued by ops inside the block."""
    counter = MacCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def add_macs(op: str, n: int) -> None:
    for c in _COUNTERS:
        c.add(op, n)


# ---------------------------------------------------------------------------
# tensor + tape

class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE: list["Graph"] = []


class Graph:
    """Operation tape. Use as a context manager to record a forward pass."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._used = False

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def reset(self) -> None:
        self.nodes.clear()
        self._used = False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._used:
            raise ContractError("graph already consumed by backward; call reset() first")
        self._used = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                _check_finite(gi, "backward")
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        # whatever is left belongs to leaves
        seen = set()
        for node in self.nodes:
            for t in node.inputs:
                key = id(t)
                if key in grads and key not in seen and t.requires_grad:
                    seen.add(key)
                    g = grads[key].astype(t.data.dtype, copy=False)
                    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(graph: Graph, loss: Tensor) -> None:
    graph.backward(loss)


def recording() -> bool:
    return bool(_ACTIVE)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced in {where}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str = "op") -> Tensor:
    """Wrap ``data`` as an op output and put it on the active tape.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    _check_finite(data, op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = needs and bool(_ACTIVE)
    if out.requires_grad:
        _ACTIVE[-1].nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    add_macs("mul", out.size)
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                             _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
                  "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _has_array_index(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in idx)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        if _has_array_index(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return record(np.array(a.data[index]), (a,), bw, "getitem")


def embedding(weight: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup ``weight[indices]``."""
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= weight.shape[0]):
        raise IndexError(f"index out of range for table with {weight.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, indices.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return record(weight.data[indices], (weight,), bw, "embedding")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                  lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    """Batched contraction ``a[..., M, K] @ b[..., K, P]`` with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    add_macs("matmul", out.size * a.shape[-1])

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return record(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# activations

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so neither tail overflows or cancels
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return record(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return record(x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),), "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return record(out, (x,), bw, "gelu")


SOFTPLUS_LINEAR_ABOVE = 30.0


def softplus(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    big = v > SOFTPLUS_LINEAR_ABOVE
    out = np.where(big, v, np.log1p(np.exp(np.minimum(v, SOFTPLUS_LINEAR_ABOVE))))
    return record(out, (x,), lambda g: (g * np.where(big, 1.0, _sigmoid(v)),), "softplus")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return record(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    return record(out, (x,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),),
                  "log_softmax")


# ---------------------------------------------------------------------------
# layers

def layer_norm(x, gamma, beta, eps: float = 1e-12) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return record(out, (x, gamma, beta), bw, "layer_norm")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def causal_depthwise_conv1d(x, w, bias) -> Tensor:
    """Per-channel causal convolution over the time axis.

    x: (B, L, C), w: (C, K), bias: (C,). Output at t sees inputs t-K+1..t;
    positions before the start are zero.
    """
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    if w.ndim != 2 or w.shape[1] < 1:
        raise ConfigError("conv kernel must have shape (C, K) with K >= 1")
    if x.ndim != 3 or x.shape[2] != w.shape[0] or bias.shape != (w.shape[0],):
        raise DimensionError(f"conv shapes disagree: x{x.shape} w{w.shape} bias{bias.shape}")
    B, L, C = x.shape
    K = w.shape[1]
    xp = np.concatenate([np.zeros((B, K - 1, C), dtype=x.dtype), x.data], axis=1)
    out = np.broadcast_to(bias.data, (B, L, C)).copy()
    for k in range(K):
        out += w.data[:, k] * xp[:, k:k + L]
    add_macs("conv1d", B * L * C * K)

    def bw(g):
        gx = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for k in range(K):
            gx[:, k:k + L] += g * w.data[:, k]
            gw[:, k] = (g * xp[:, k:k + L]).sum(axis=(0, 1))
        return gx[:, K - 1:], gw, g.sum(axis=(0, 1))

    return record(out, (x, w, bias), bw, "conv1d")


def cross_entropy(logits, target, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of ``logits[B, V]`` against integer targets."""
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    B, V = logits.shape
    if target.shape != (B,):
        raise DimensionError(f"targets shape {target.shape} != ({B},)")
    if target.size and (target.min() < 0 or target.max() >= V):
        raise IndexError(f"target out of range [0, {V})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    nll = lse - z[rows, target]
    scale = 1.0 / B if reduction == "mean" else 1.0
    out = np.asarray(nll.sum() * scale, dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, target] -= 1.0
        return (p * (g * scale),)

    return record(out, (logits,), bw, "cross_entropy")
