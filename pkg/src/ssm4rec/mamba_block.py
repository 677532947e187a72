"""Gated selective-SSM block.

    x, z   = split(h @ w_in)
    x'     = silu(causal_conv(x))
    B, C   = x' @ w_B, x' @ w_C
    delta  = softplus(x' @ w_dt + dt_bias)          # rank-1, broadcast over channels
    y      = scan(discretize(delta, A, B), x', C)
    out    = (y * silu(z)) @ w_out
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor
from .ssm import BLOCK_METHOD, StateMatrix, init_state_matrix, selective_scan

DT_MIN, DT_MAX = 1e-3, 1e-1


@dataclass(frozen=True)
class BlockConfig:
    d_model: int = 64
    state_dim: int = 32
    conv_kernel: int = 4
    expand: int = 2

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise nx.ConfigError(f"{f.name} must be >= 1")

    @property
    def inner(self) -> int:
        return self.expand * self.d_model


@dataclass
class MambaBlockParams:
    w_in: Tensor     # (D, 2C)
    conv_w: Tensor   # (C, K)
    conv_b: Tensor   # (C,)
    w_B: Tensor      # (C, N)
    w_C: Tensor      # (C, N)
    w_dt: Tensor     # (C, 1)
    dt_bias: Tensor  # (C,)
    state: StateMatrix
    w_out: Tensor    # (C, D)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "state"}
        out["a_log"] = self.state.a_log
        return out


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_block_params(cfg: BlockConfig, seed: int, prefix: str = "block") -> MambaBlockParams:
    """Fan-in uniform weights; dt_bias so that softplus(dt_bias) is log-uniform in [1e-3, 1e-1].

    Each tensor draws from its own stream keyed by ``prefix.name`` so that
    adding or removing parameters elsewhere never shifts these values.
    """
    D, C, N, K = cfg.d_model, cfg.inner, cfg.state_dim, cfg.conv_kernel
    dt = nx.default_dtype()

    def rng(name):
        return nx.make_rng(seed, f"{prefix}.{name}")

    def param(name, arr):
        return Tensor(np.asarray(arr, dtype=dt), requires_grad=True, name=f"{prefix}.{name}")

    step = np.exp(rng("dt_bias").uniform(np.log(DT_MIN), np.log(DT_MAX), size=C))
    state = init_state_matrix(C, N)
    state.a_log.name = f"{prefix}.a_log"
    return MambaBlockParams(
        w_in=param("w_in", _uniform(rng("w_in"), (D, 2 * C), D)),
        conv_w=param("conv_w", _uniform(rng("conv_w"), (C, K), K)),
        conv_b=param("conv_b", _uniform(rng("conv_b"), (C,), K)),
        w_B=param("w_B", _uniform(rng("w_B"), (C, N), C)),
        w_C=param("w_C", _uniform(rng("w_C"), (C, N), C)),
        w_dt=param("w_dt", _uniform(rng("w_dt"), (C, 1), C)),
        dt_bias=param("dt_bias", inverse_softplus(step)),
        state=state,
        w_out=param("w_out", _uniform(rng("w_out"), (C, D), C)),
    )


def project_in(h_in: Tensor, params: MambaBlockParams) -> tuple[Tensor, Tensor]:
    if h_in.shape[-1] != params.w_in.shape[0]:
        raise DimensionError(f"block expects last extent {params.w_in.shape[0]}, got {h_in.shape}")
    xz = nx.matmul(h_in, params.w_in)
    C = params.w_in.shape[1] // 2
    return xz[..., :C], xz[..., C:]


def generate_ssm_params(h_conv: Tensor, params: MambaBlockParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent B, C (B, L, N) and step sizes delta (B, L, C)."""
    b = nx.matmul(h_conv, params.w_B)
    c = nx.matmul(h_conv, params.w_C)
    delta = nx.softplus(nx.matmul(h_conv, params.w_dt) + params.dt_bias)
    return b, c, delta


def mamba_block_forward(h_in: Tensor, params: MambaBlockParams, rng=None,
                        mask: np.ndarray | None = None, method: str = BLOCK_METHOD) -> Tensor:
    """Run the block on ``h_in`` (B, L, D).

    ``mask`` (B, L) marks real positions. Masked positions feed nothing into
    the recurrence, so leading padding leaves the state at zero. ``rng`` is
    accepted for interface symmetry; the block itself is deterministic.
    """
    h_x, h_z = project_in(h_in, params)
    h_conv = nx.silu(nx.causal_depthwise_conv1d(h_x, params.conv_w, params.conv_b))
    if mask is not None:
        h_conv = h_conv * mask[..., None].astype(h_conv.dtype)
    b, c, delta = generate_ssm_params(h_conv, params)
    A = -nx.exp(params.state.a_log)
    y = selective_scan(h_conv, delta, A, b, c, method=method)
    return nx.matmul(y * nx.silu(h_z), params.w_out)
