"""Adam training loop with validation-driven early stopping."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import InteractionDataset, build_splits, make_batch, pack_train_windows, trim_leading_pads
from .evaluation import evaluate
from .model import Model, logits, model_forward, model_hidden
from .numerics import Graph, NonFiniteError, Tensor

log = logging.getLogger(__name__)


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState) -> None:
    """Bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    train_batch: int = 2048
    eval_batch: int = 4096
    max_epochs: int = 100
    patience: int = 10
    seed: int = 2024
    micro_batch: int = 64        # rows per forward/backward; gradients accumulate to train_batch
    layout: str = "prefix"       # "prefix" instances or "packed" whole-sequence windows
    mask_history: bool = True

    def __post_init__(self):
        if self.train_batch < 1 or self.eval_batch < 1 or self.micro_batch < 1:
            raise nx.ConfigError("batch sizes must be >= 1")
        if self.layout not in ("prefix", "packed"):
            raise nx.ConfigError(f"unknown layout {self.layout!r}")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, best_model: Model | None, history: list[dict]):
        super().__init__(message)
        self.best_model = best_model
        self.history = history


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    best_epoch: int
    best_valid_ndcg: float


def _snapshot(model: Model) -> Model:
    return copy.deepcopy(model)


def _grads(named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    out = {}
    for name, t in named.items():
        out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        if name == "item_embedding":
            out[name] = out[name].copy()
            out[name][0] = 0.0
    return out


def _prefix_units(dataset, splits, L):
    inst = splits.train

    def rows(idx):
        b = make_batch(dataset, inst, idx, L)
        return b.items[:, trim_leading_pads(b.items):], b.targets

    return len(inst), rows


def _packed_units(dataset, L):
    windows = pack_train_windows(dataset, L)

    def rows(idx):
        items, targets = windows.items[idx], windows.targets[idx]
        start = trim_leading_pads(items)
        return items[:, start:], targets[:, start:]

    return len(windows.items), rows


def _loss(model: Model, items: np.ndarray, targets: np.ndarray, rng, layout: str) -> Tensor:
    if layout == "prefix":
        h = model_forward(items, model, rng, training=True)
        return nx.cross_entropy(logits(h, model.params), targets, reduction="sum")
    h = model_hidden(items, model, rng, training=True)
    sel = np.nonzero(targets)
    picked = h[sel]
    return nx.cross_entropy(logits(picked, model.params), targets[sel], reduction="sum")


def train_epoch(model: Model, units: int, rows, state: OptimState, cfg: TrainConfig,
                epoch: int, layout: str) -> float:
    """One shuffled pass; returns mean cross-entropy per training target."""
    named = model.params.named_tensors()
    order = nx.make_rng(cfg.seed, "shuffle", epoch).permutation(units)
    drop_rng = nx.make_rng(cfg.seed, "dropout", epoch)
    loss_sum, seen = 0.0, 0
    for s in range(0, units, cfg.train_batch):
        batch = order[s:s + cfg.train_batch]
        chunks = [batch[i:i + cfg.micro_batch] for i in range(0, len(batch), cfg.micro_batch)]
        loaded = [rows(c) for c in chunks]
        n_targets = sum(int(np.count_nonzero(t)) if layout == "packed" else len(t) for _, t in loaded)
        for t in named.values():
            t.zero_grad()
        for items, targets in loaded:
            with Graph() as g:
                loss = _loss(model, items, targets, drop_rng, layout)
                g.backward(nx.mul(loss, 1.0 / n_targets))
            loss_sum += loss.item()
        seen += n_targets
        if not np.isfinite(loss_sum):
            raise NonFiniteError("training loss is not finite")
        adam_step(named, _grads(named), state)
    return loss_sum / max(seen, 1)


def train(model: Model, dataset: InteractionDataset, cfg: TrainConfig,
          log_path: str | Path | None = None) -> TrainResult:
    """Train until ``patience`` epochs pass without a better validation NDCG@10.

    Returns the best-validation snapshot, not the last one.
    """
    splits = build_splits(dataset)
    L = model.config.max_len
    if cfg.layout == "prefix":
        units, rows = _prefix_units(dataset, splits, L)
    else:
        units, rows = _packed_units(dataset, L)
    if units == 0:
        raise ValueError("training split is empty")
    state = OptimState(lr=cfg.lr)
    history: list[dict] = []
    best, best_epoch, best_ndcg, stale = _snapshot(model), 0, -1.0, 0
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            try:
                loss = train_epoch(model, units, rows, state, cfg, epoch, cfg.layout)
            except NonFiniteError as e:
                raise TrainingDiverged(f"diverged in epoch {epoch}: {e}", best, history) from e
            report = evaluate(model, dataset, "valid", k=10, mask_history=cfg.mask_history,
                              eval_batch=cfg.eval_batch, splits=splits)
            entry = {"epoch": epoch, "loss": loss, "valid_ndcg10": report.ndcg}
            history.append(entry)
            if log_file:
                log_file.write(json.dumps({**entry, "seconds": time.perf_counter() - t0}) + "\n")
                log_file.flush()
            log.info("epoch %d loss %.4f valid ndcg@10 %.4f", epoch, loss, report.ndcg)
            if report.ndcg > best_ndcg:
                best, best_epoch, best_ndcg, stale = _snapshot(model), epoch, report.ndcg, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    finally:
        if log_file:
            log_file.close()
    return TrainResult(best, history, best_epoch, best_ndcg)


def write_history(path: str | Path, history: list[dict]) -> None:
    Path(path).write_text(json.dumps(history, indent=1, sort_keys=True) + "\n")
