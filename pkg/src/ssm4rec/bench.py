"""Sequence-length scaling of a Mamba layer against causal softmax attention."""

from __future__ import annotations

import math
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .mamba_block import BlockConfig
from .model import ModelConfig, init_params, mamba_layer_forward
from .numerics import Tensor

MASK_VALUE = -1e9


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor


def init_attention_params(d_model: int, seed: int) -> AttentionParams:
    bound = 1.0 / math.sqrt(d_model)

    def w(name):
        arr = nx.make_rng(seed, f"attention.{name}").uniform(-bound, bound, (d_model, d_model))
        return Tensor(arr.astype(nx.default_dtype()), requires_grad=True, name=name)

    return AttentionParams(w("w_q"), w("w_k"), w("w_v"))


def reference_attention_forward(h: Tensor, params: AttentionParams) -> Tensor:
    """Single-head causal self-attention, softmax(QK^T / sqrt(D) + mask) V."""
    h = nx.as_tensor(h)
    L, D = h.shape[-2], h.shape[-1]
    q = nx.matmul(h, params.w_q)
    k = nx.matmul(h, params.w_k)
    v = nx.matmul(h, params.w_v)
    scores = nx.matmul(q, nx.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(D))
    future = np.triu(np.ones((L, L), dtype=bool), k=1)
    scores = scores + np.where(future, MASK_VALUE, 0.0).astype(scores.dtype)
    return nx.matmul(nx.softmax(scores, axis=-1), v)


@dataclass
class BenchResult:
    lengths: list[int]
    batch: int
    d_model: int
    mamba_seconds: list[float]
    attention_seconds: list[float]
    mamba_macs: list[int]
    attention_macs: list[int]
    mamba_peak_bytes: list[int]
    attention_peak_bytes: list[int]
    mamba_exponent: float
    attention_exponent: float
    fit_range: tuple[int, int]
    reps: int
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def markdown(self) -> str:
        rows = ["| L | mamba s | attention s | mamba MACs | attention MACs |",
                "|---|---|---|---|---|"]
        for i, L in enumerate(self.lengths):
            rows.append(f"| {L} | {self.mamba_seconds[i]:.4f} | {self.attention_seconds[i]:.4f} "
                        f"| {self.mamba_macs[i]} | {self.attention_macs[i]} |")
        rows.append("")
        rows.append(f"fitted exponent over L in {list(self.fit_range)}: "
                    f"mamba {self.mamba_exponent:.3f}, attention {self.attention_exponent:.3f}")
        return "\n".join(rows)


def fit_exponent(lengths, seconds) -> float:
    """Slope of log(time) against log(L)."""
    slope, _ = np.polyfit(np.log(np.asarray(lengths, float)), np.log(np.asarray(seconds, float)), 1)
    return float(slope)


def _median_time(fn, reps: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _measure(fn) -> tuple[int, int]:
    with nx.count_macs() as counter:
        tracemalloc.start()
        fn()
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
    return counter.total, peak


def run_bench(lengths=(64, 128, 256, 512, 1024), batch: int = 8, d_model: int = 64,
              state_dim: int = 32, conv_kernel: int = 4, expand: int = 2, reps: int = 5,
              seed: int = 0, fit_min: int = 128, fit_max: int = 1024) -> BenchResult:
    """Median forward time of one Mamba layer and one attention layer per length."""
    if batch < 1 or d_model < 1 or reps < 1:
        raise nx.ConfigError("batch, d_model and reps must be >= 1")
    lengths = sorted(int(L) for L in lengths)
    if not lengths or lengths[0] < 1:
        raise nx.ConfigError("lengths must be positive")
    cfg = ModelConfig(vocab_size=2, max_len=max(lengths), dropout_embed=0.0, dropout_hidden=0.0,
                      block=BlockConfig(d_model, state_dim, conv_kernel, expand))
    params = init_params(cfg, seed)
    attn = init_attention_params(d_model, seed)
    rng = nx.make_rng(seed, "bench-input")
    res = {k: [] for k in ("ms", "as", "mm", "am", "mp", "ap")}
    for L in lengths:
        h = Tensor(rng.standard_normal((batch, L, d_model)))

        def mamba():
            return mamba_layer_forward(h, 0, params, cfg)

        def attention():
            return reference_attention_forward(h, attn)

        res["ms"].append(_median_time(mamba, reps))
        res["as"].append(_median_time(attention, reps))
        macs, peak = _measure(mamba)
        res["mm"].append(macs)
        res["mp"].append(peak)
        macs, peak = _measure(attention)
        res["am"].append(macs)
        res["ap"].append(peak)
    sel = [i for i, L in enumerate(lengths) if fit_min <= L <= fit_max]
    if len(sel) < 2:
        raise nx.ConfigError(f"need at least two lengths in [{fit_min}, {fit_max}] to fit exponents")
    pick = lambda xs: [xs[i] for i in sel]  # noqa: E731
    return BenchResult(
        lengths=lengths, batch=batch, d_model=d_model,
        mamba_seconds=res["ms"], attention_seconds=res["as"],
        mamba_macs=res["mm"], attention_macs=res["am"],
        mamba_peak_bytes=res["mp"], attention_peak_bytes=res["ap"],
        mamba_exponent=fit_exponent(pick(lengths), pick(res["ms"])),
        attention_exponent=fit_exponent(pick(lengths), pick(res["as"])),
        fit_range=(fit_min, fit_max), reps=reps,
    )
