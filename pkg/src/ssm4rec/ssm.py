"""Discretized diagonal state-space recurrence.

Per channel ``c`` and state ``n``::

    h[t] = a_bar[t, c, n] * h[t-1] + b_bar[t, c, n] * x[t, c]
    y[t, c] = sum_n C[t, n] * h[t, n]

with zero-order-hold discretization ``a_bar = exp(delta * A)`` and
``b_bar = (exp(delta * A) - 1) / A * B``. Two evaluators share that
contract: a plain time loop, and a chunked Blelloch scan over the monoid
``(a1, b1) . (a2, b2) = (a1 * a2, a2 * b1 + b2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractError, Tensor, add_macs, as_tensor, default_dtype, record

SERIES_BELOW = 1e-6
CHUNK = 128
# Scan used by the block. On a CPU the time loop is already vectorized over
# every (batch, channel, state) lane and touches memory once, while each tree
# level of the Blelloch scan sweeps the whole tensor again; the loop is an
# order of magnitude faster here. Both give the same result.
BLOCK_METHOD = "sequential"


@dataclass
class StateMatrix:
    """Diagonal A stored as ``a_log = ln(-A)`` so A stays negative under updates."""

    a_log: Tensor

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.a_log.data)


@dataclass
class DiscretizedParams:
    a_bar: Tensor    # (B, L, C, N)
    b_bar_x: Tensor  # (B, L, C, N)
    c: Tensor        # (B, L, N)


def init_state_matrix(channels: int, state_dim: int) -> StateMatrix:
    """Real diagonal init A[c, n] = -(n + 1), identical across channels."""
    if channels < 1 or state_dim < 1:
        raise ValueError("channels and state_dim must be >= 1")
    row = np.log(np.arange(1, state_dim + 1, dtype=np.float64))
    a_log = np.tile(row, (channels, 1)).astype(default_dtype())
    return StateMatrix(Tensor(a_log, requires_grad=True, name="a_log"))


def combine(first: tuple, second: tuple) -> tuple:
    """Associative operator: apply ``first`` then ``second``."""
    a1, b1 = first
    a2, b2 = second
    return a1 * a2, a2 * b1 + b2


# ---------------------------------------------------------------------------
# zero-order hold

def _phi(z: np.ndarray) -> np.ndarray:
    """expm1(z) / z with a series branch near zero."""
    small = np.abs(z) < SERIES_BELOW
    zs = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2.0 + z * z / 6.0, np.expm1(zs) / zs)


def _dphi(z: np.ndarray, ez: np.ndarray, phi: np.ndarray) -> np.ndarray:
    small = np.abs(z) < SERIES_BELOW
    zs = np.where(small, 1.0, z)
    return np.where(small, 0.5 + z / 3.0, (ez - phi) / zs)


def discretize(delta, a, b) -> tuple[Tensor, Tensor]:
    """Zero-order-hold discretization.

    delta: (B, L, C) step sizes, a: (C, N) diagonal of A, b: (B, L, N).
    Returns ``(a_bar, b_bar)``, both (B, L, C, N).
    """
    delta, a, b = as_tensor(delta), as_tensor(a), as_tensor(b)
    if np.any(delta.data <= 0):
        raise ContractError("discretize needs strictly positive step sizes")
    d = delta.data[..., None]
    z = d * a.data
    a_bar = np.exp(z)
    phi = _phi(z)
    bb = b.data[:, :, None, :]
    b_bar = d * phi * bb

    def bw(g):
        g_abar, g_bbar = g
        dphi = _dphi(z, a_bar, phi)
        # dz collects everything flowing through z = delta * a
        dz = g_abar * a_bar + g_bbar * d * dphi * bb
        g_delta = (dz * a.data + g_bbar * phi * bb).sum(axis=-1)
        g_a = (dz * d).sum(axis=(0, 1))
        g_b = (g_bbar * d * phi).sum(axis=2)
        return g_delta, g_a, g_b

    return _pair(a_bar, b_bar, (delta, a, b), bw, "discretize")


def _pair(first: np.ndarray, second: np.ndarray, inputs, bw, op: str) -> tuple[Tensor, Tensor]:
    """Record an op with two outputs by stacking them into one tape entry."""
    stacked = record(np.stack([first, second]), inputs, lambda g: bw((g[0], g[1])), op)
    return _take(stacked, 0), _take(stacked, 1)


def _take(t: Tensor, i: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(t.data)
        full[i] = g
        return (full,)

    return record(t.data[i], (t,), bw, "take")


# ---------------------------------------------------------------------------
# scan kernels on raw arrays, time on axis 1

def scan_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """h[t] = a[t] * h[t-1] + b[t], h[-1] = 0."""
    h = np.empty_like(b)
    if b.shape[1] == 0:
        return h
    prev = np.zeros_like(b[:, 0])
    for t in range(b.shape[1]):
        prev = a[:, t] * prev + b[:, t]
        h[:, t] = prev
    return h


def _blelloch_inclusive(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive scan along axis 1 via up-sweep / down-sweep.

    Returns the running composite ``(A_t, B_t)`` so that for any carried-in
    state ``h``: ``h_t = A_t * h + B_t``.
    """
    n = a.shape[1]
    size = 1 << max(0, (n - 1).bit_length())
    if size != n:
        pad = [(0, 0)] * a.ndim
        pad[1] = (0, size - n)
        sa = np.pad(a, pad, constant_values=1.0)
        sb = np.pad(b, pad, constant_values=0.0)
    else:
        sa, sb = a.copy(), b.copy()

    d = 1
    while d < size:
        left, right = slice(d - 1, size, 2 * d), slice(2 * d - 1, size, 2 * d)
        sb[:, right] = sa[:, right] * sb[:, left] + sb[:, right]
        sa[:, right] = sa[:, left] * sa[:, right]
        d *= 2

    sa[:, size - 1] = 1.0
    sb[:, size - 1] = 0.0
    d = size // 2
    while d >= 1:
        left, right = slice(d - 1, size, 2 * d), slice(2 * d - 1, size, 2 * d)
        ta, tb = sa[:, left].copy(), sb[:, left].copy()
        sa[:, left], sb[:, left] = sa[:, right], sb[:, right]
        # prefix-before-left-subtree, then the left subtree itself
        sb[:, right] = ta * sb[:, right] + tb
        sa[:, right] = sa[:, left] * ta
        d //= 2

    # exclusive -> inclusive
    ex_a, ex_b = sa[:, :n], sb[:, :n]
    return ex_a * a, a * ex_b + b


def scan_chunked(a: np.ndarray, b: np.ndarray, chunk: int = CHUNK) -> np.ndarray:
    """Blelloch scan inside fixed-size chunks with a carried state between them."""
    h = np.empty_like(b)
    L = b.shape[1]
    if L == 0:
        return h
    carry = np.zeros_like(b[:, 0])
    for s in range(0, L, chunk):
        e = min(s + chunk, L)
        ca, cb = _blelloch_inclusive(a[:, s:e], b[:, s:e])
        h[:, s:e] = ca * carry[:, None] + cb
        carry = h[:, e - 1]
    return h


def _scan(a: np.ndarray, b: np.ndarray, method: str) -> np.ndarray:
    if method == "sequential":
        return scan_loop(a, b)
    if method == "parallel":
        return scan_chunked(a, b)
    raise ValueError(f"unknown scan method {method!r}")


def _reverse_scan(a: np.ndarray, g: np.ndarray, method: str) -> np.ndarray:
    """Adjoint recurrence dh[t] = g[t] + a[t+1] * dh[t+1]."""
    a_next = np.concatenate([a[:, 1:], np.zeros_like(a[:, :1])], axis=1)
    return _scan(a_next[:, ::-1], g[:, ::-1], method)[:, ::-1]


def _shift_right(h: np.ndarray) -> np.ndarray:
    return np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)


def _readout(h: np.ndarray, c: np.ndarray) -> np.ndarray:
    # (B, L, C, N) @ (B, L, N, 1) -> (B, L, C)
    return np.matmul(h, c[..., None])[..., 0]


def _readout_grads(h: np.ndarray, c: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g_h = g[..., None] * c[:, :, None, :]
    g_c = np.matmul(g[:, :, None, :], h)[:, :, 0, :]
    return g_h, g_c


# ---------------------------------------------------------------------------
# differentiable scans over pre-discretized parameters

def _selective_scan(params: DiscretizedParams, method: str) -> Tensor:
    a_bar, bx, c = params.a_bar, params.b_bar_x, params.c
    if a_bar.shape != bx.shape or a_bar.ndim != 4 or c.shape != (*a_bar.shape[:2], a_bar.shape[3]):
        raise ValueError(f"inconsistent scan shapes a{a_bar.shape} bx{bx.shape} c{c.shape}")
    h = _scan(a_bar.data, bx.data, method)
    y = _readout(h, c.data)
    add_macs("scan", 2 * h.size)

    def bw(g):
        g_h, g_c = _readout_grads(h, c.data, g)
        dh = _reverse_scan(a_bar.data, g_h, method)
        return dh * _shift_right(h), dh, g_c

    return record(y, (a_bar, bx, c), bw, "selective_scan")


def selective_scan_sequential(params: DiscretizedParams) -> Tensor:
    """Time-loop evaluation; returns y of shape (B, L, C)."""
    return _selective_scan(params, "sequential")


def selective_scan_parallel(params: DiscretizedParams) -> Tensor:
    """Chunked Blelloch evaluation; same result as the time loop."""
    return _selective_scan(params, "parallel")


# ---------------------------------------------------------------------------
# fused path used by the block

def selective_scan(x, delta, a, b, c, method: str = "parallel") -> Tensor:
    """Discretize and scan in one op.

    x, delta: (B, L, C); a: (C, N); b, c: (B, L, N). Equivalent to
    ``discretize`` followed by a scan over ``b_bar * x`` but keeps a single
    tape entry and never stores the (B, L, C, N) intermediates twice.
    """
    x, delta, a, b, c = (as_tensor(t) for t in (x, delta, a, b, c))
    if np.any(delta.data <= 0):
        raise ContractError("selective_scan needs strictly positive step sizes")
    d = delta.data[..., None]
    z = d * a.data
    a_bar = np.exp(z)
    phi = _phi(z)
    bb = b.data[:, :, None, :]
    b_bar = d * phi * bb
    h = _scan(a_bar, b_bar * x.data[..., None], method)
    y = _readout(h, c.data)
    add_macs("scan", 2 * h.size)

    def bw(g):
        g_h, g_c = _readout_grads(h, c.data, g)
        dh = _reverse_scan(a_bar, g_h, method)
        g_abar = dh * _shift_right(h)
        g_x = (dh * b_bar).sum(axis=-1)
        g_bbar = dh * x.data[..., None]
        dz = g_abar * a_bar + g_bbar * d * _dphi(z, a_bar, phi) * bb
        g_delta = (dz * a.data + g_bbar * phi * bb).sum(axis=-1)
        g_a = (dz * d).sum(axis=(0, 1))
        g_b = (g_bbar * d * phi).sum(axis=2)
        return g_x, g_delta, g_a, g_b, g_c

    return record(y, (x, delta, a, b, c), bw, "selective_scan")
