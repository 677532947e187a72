"""Full-catalogue ranking metrics for leave-one-out next-item evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import InteractionDataset, Splits, build_splits, make_batch, trim_leading_pads
from .model import Model, model_forward, predict_scores
from .numerics import ContractError

Scorer = Callable[[np.ndarray], np.ndarray]


@dataclass
class MetricsReport:
    hr: float
    ndcg: float
    mrr: float
    k: int
    per_user_rank: np.ndarray | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {"hr": self.hr, "ndcg": self.ndcg, "mrr": self.mrr, "k": self.k}


def rank_target(scores: np.ndarray, target: int, mask=()) -> int:
    """1-based rank of ``target``; ties go to the lower item index. Index 0 is never ranked."""
    scores = np.asarray(scores, dtype=np.float64)
    masked = np.zeros(len(scores), dtype=bool)
    masked[0] = True
    masked[list(mask)] = True
    if masked[target]:
        raise ContractError(f"target {target} is masked")
    s = scores[target]
    live = ~masked
    above = (scores > s) & live
    tied = (scores == s) & live
    tied[target:] = False
    return int(1 + above.sum() + tied.sum())


def batch_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Row-wise :func:`rank_target` where masked entries already hold -inf."""
    rows = np.arange(len(targets))
    s = scores[rows, targets][:, None]
    if not np.all(np.isfinite(s)):
        raise ContractError("a target is masked")
    idx = np.arange(scores.shape[1])[None, :]
    better = (scores > s) | ((scores == s) & (idx < targets[:, None]))
    return 1 + better.sum(axis=1)


def metrics_at_k(ranks, k: int = 10) -> MetricsReport:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ContractError("no ranks to aggregate")
    if np.any(ranks < 1):
        raise ContractError("ranks are 1-based")
    hit = ranks <= k
    r = ranks.astype(np.float64)
    return MetricsReport(
        hr=float(hit.mean()),
        ndcg=float(np.where(hit, 1.0 / np.log2(r + 1.0), 0.0).mean()),
        mrr=float(np.where(hit, 1.0 / r, 0.0).mean()),
        k=k,
        per_user_rank=ranks,
    )


def model_scorer(model: Model, chunk: int = 64) -> Scorer:
    def score(items: np.ndarray) -> np.ndarray:
        out = []
        for s in range(0, len(items), chunk):
            part = items[s:s + chunk]
            h = model_forward(part[:, trim_leading_pads(part):], model, training=False)
            out.append(predict_scores(h, model.params))
        return np.concatenate(out).astype(np.float64)

    return score


def popularity_counts(dataset: InteractionDataset, split: str) -> np.ndarray:
    """Item frequencies over everything a model may see before ``split`` targets."""
    drop = 1 if split == "test" else 2
    counts = np.zeros(dataset.num_items + 1)
    for seq in dataset.sequences:
        np.add.at(counts, seq[: len(seq) - drop], 1.0)
    return counts


def popularity_scorer(counts: np.ndarray) -> Scorer:
    def score(items: np.ndarray) -> np.ndarray:
        s = np.tile(counts.astype(np.float64), (len(items), 1))
        s[:, 0] = -np.inf
        return s

    return score


def evaluate(scorer: Scorer | Model, dataset: InteractionDataset, split: str = "test", k: int = 10,
             max_len: int | None = None, mask_history: bool = True, eval_batch: int = 4096,
             splits: Splits | None = None) -> MetricsReport:
    """Rank each user's held-out item against the whole catalogue."""
    if split not in ("valid", "test"):
        raise ValueError(f"split must be 'valid' or 'test', got {split!r}")
    if isinstance(scorer, Model):
        max_len = max_len or scorer.config.max_len
        scorer = model_scorer(scorer)
    if max_len is None:
        raise ValueError("max_len required for a plain scorer")
    splits = splits or build_splits(dataset)
    inst = getattr(splits, split)
    ranks = np.empty(len(inst), dtype=np.int64)
    for s in range(0, len(inst), eval_batch):
        idx = np.arange(s, min(s + eval_batch, len(inst)))
        batch = make_batch(dataset, inst, idx, max_len)
        scores = np.array(scorer(batch.items), dtype=np.float64)
        scores[:, 0] = -np.inf
        if mask_history:
            for r, j in enumerate(idx):
                hist = dataset.sequences[inst.users[j]][: inst.positions[j]]
                hist = hist[hist != inst.targets[j]]
                scores[r, hist] = -np.inf
        ranks[idx] = batch_ranks(scores, batch.targets)
    return metrics_at_k(ranks, k)


def write_report(path: str | Path, report: MetricsReport, split: str, num_users: int,
                 seed: int, config_hash: str) -> dict:
    payload = {
        "split": split,
        "k": report.k,
        "hr": report.hr,
        "ndcg": report.ndcg,
        "mrr": report.mrr,
        "num_users": num_users,
        "seed": seed,
        "config_hash": config_hash,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload
