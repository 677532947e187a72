"""Interaction logs -> k-core filtered, chronologically ordered item sequences.

Item index 0 is reserved for padding; real items are numbered from 1.
Per user with sequence v1..vn the leave-one-out split is

    test   v1..v(n-1) -> vn
    valid  v1..v(n-2) -> v(n-1)
    train  v1..v(t-1) -> vt   for 2 <= t <= n-2
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .container import decode_text, encode_text, load_tensors, save_tensors

FORMATS = ("ml-1m", "amazon-csv", "tsv")


class ParseError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


class InteractionRecord(NamedTuple):
    user_id: str
    item_id: str
    timestamp: int


# ---------------------------------------------------------------------------
# parsing

def parse_line(line: str, fmt: str, lineno: int = 0) -> InteractionRecord:
    if fmt == "ml-1m":
        parts, want = line.split("::"), 4
    elif fmt == "amazon-csv":
        parts, want = line.split(","), 4
    elif fmt == "tsv":
        parts, want = line.split("\t"), 3
    else:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    if len(parts) != want:
        raise ParseError(f"line {lineno}: expected {want} fields for {fmt}, got {len(parts)}")
    user, item, ts = parts[0], parts[1], parts[-1].strip()
    try:
        timestamp = int(ts)
    except ValueError:
        try:
            as_float = float(ts)
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric timestamp {ts!r}") from None
        if not as_float.is_integer():
            raise ParseError(f"line {lineno}: fractional timestamp {ts!r}")
        timestamp = int(as_float)
    return InteractionRecord(user.strip(), item.strip(), timestamp)


def parse_interactions(path: str | Path, fmt: str) -> list[InteractionRecord]:
    """Read an interaction log; ratings, when present, are dropped."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    records = []
    with open(path, encoding="latin-1") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            records.append(parse_line(line, fmt, lineno))
    return records


# ---------------------------------------------------------------------------
# filtering

def k_core_filter(records: list[InteractionRecord], k: int = 5) -> list[InteractionRecord]:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not records:
        raise EmptyDatasetError("empty after filtering (no input records)")
    _, users = np.unique([r.user_id for r in records], return_inverse=True)
    _, items = np.unique([r.item_id for r in records], return_inverse=True)
    keep = np.ones(len(records), dtype=bool)
    while True:
        u_count = np.bincount(users[keep], minlength=users.max() + 1)
        i_count = np.bincount(items[keep], minlength=items.max() + 1)
        drop = keep & ((u_count[users] < k) | (i_count[items] < k))
        if not drop.any():
            break
        keep &= ~drop
    if not keep.any():
        raise EmptyDatasetError(f"empty after filtering (no {k}-core exists)")
    return [r for r, kp in zip(records, keep) if kp]


# ---------------------------------------------------------------------------
# dataset

@dataclass
class InteractionDataset:
    user_ids: list[str]
    item_ids: list[str]              # item_ids[i] is item index i + 1
    sequences: list[np.ndarray]      # per user, chronological item indices

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_interactions(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    @property
    def avg_length(self) -> float:
        return self.num_interactions / self.num_users

    def stats(self) -> dict:
        return {
            "users": self.num_users,
            "items": self.num_items,
            "interactions": self.num_interactions,
            "avg_length": round(self.avg_length, 1),
        }


def build_dataset(records: list[InteractionRecord]) -> InteractionDataset:
    """Index users/items in first-seen order and sort each user's history by time.

    Ties on timestamp keep input order.
    """
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    per_user: list[list[tuple[int, int, int]]] = []
    for pos, r in enumerate(records):
        u = user_index.setdefault(r.user_id, len(user_index))
        if u == len(per_user):
            per_user.append([])
        i = item_index.setdefault(r.item_id, len(item_index) + 1)
        per_user[u].append((r.timestamp, pos, i))
    sequences = [np.array([i for _, _, i in sorted(rows)], dtype=np.int64) for rows in per_user]
    return InteractionDataset(list(user_index), list(item_index), sequences)


def subsample_users(dataset: InteractionDataset, n: int, seed: int = 0) -> InteractionDataset:
    """Uniform sample of ``n`` users without replacement, items re-indexed to those still seen."""
    if n >= dataset.num_users:
        return dataset
    users = np.sort(np.random.default_rng(seed).choice(dataset.num_users, n, replace=False))
    records = [InteractionRecord(dataset.user_ids[u], dataset.item_ids[i - 1], t)
               for u in users for t, i in enumerate(dataset.sequences[u])]
    return build_dataset(records)


@dataclass
class Instances:
    """Next-item instances as (user, position) pairs: context = seq[:position], target = seq[position]."""

    users: np.ndarray
    positions: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


@dataclass
class Splits:
    train: Instances
    valid: Instances
    test: Instances


def _instances(dataset: InteractionDataset, pairs: list[tuple[int, int]]) -> Instances:
    if not pairs:
        empty = np.zeros(0, dtype=np.int64)
        return Instances(empty, empty.copy(), empty.copy())
    users, positions = (np.array(x, dtype=np.int64) for x in zip(*pairs))
    targets = np.array([dataset.sequences[u][p] for u, p in pairs], dtype=np.int64)
    return Instances(users, positions, targets)


def build_splits(dataset: InteractionDataset) -> Splits:
    train, valid, test = [], [], []
    for u, seq in enumerate(dataset.sequences):
        n = len(seq)
        if n < 3:
            raise ValueError(f"user {dataset.user_ids[u]} has {n} < 3 interactions")
        test.append((u, n - 1))
        valid.append((u, n - 2))
        train.extend((u, t) for t in range(1, n - 2))
    return Splits(_instances(dataset, train), _instances(dataset, valid), _instances(dataset, test))


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    items: np.ndarray     # (B, L), left-padded
    targets: np.ndarray   # (B,)
    lengths: np.ndarray   # (B,)
    users: np.ndarray     # (B,)


def left_pad(context: np.ndarray, L: int) -> np.ndarray:
    row = np.zeros(L, dtype=np.int64)
    tail = context[-L:]
    if len(tail):
        row[L - len(tail):] = tail
    return row


def trim_leading_pads(items: np.ndarray) -> int:
    """Number of leading columns that are padding in every row.

    Dropping them changes no output of a causal model whose pad positions
    carry no state, and saves the work of running the block over them.
    """
    real = np.flatnonzero(items.any(axis=0))
    return int(real[0]) if len(real) else max(items.shape[1] - 1, 0)


def make_batch(dataset: InteractionDataset, inst: Instances, idx: np.ndarray, L: int) -> Batch:
    rows = np.zeros((len(idx), L), dtype=np.int64)
    lengths = np.zeros(len(idx), dtype=np.int64)
    for r, j in enumerate(idx):
        ctx = dataset.sequences[inst.users[j]][: inst.positions[j]]
        rows[r] = left_pad(ctx, L)
        lengths[r] = min(len(ctx), L)
    return Batch(rows, inst.targets[idx], lengths, inst.users[idx])


def pad_and_batch(dataset: InteractionDataset, inst: Instances, L: int, batch_size: int,
                  rng: np.random.Generator | None = None, shuffle: bool = False) -> Iterator[Batch]:
    """Yield left-padded batches keeping the most recent ``L`` context items."""
    if L < 1 or batch_size < 1:
        raise ValueError("L and batch_size must be >= 1")
    order = np.arange(len(inst))
    if shuffle:
        order = rng.permutation(len(inst))
    for s in range(0, len(order), batch_size):
        yield make_batch(dataset, inst, order[s:s + batch_size], L)


@dataclass
class PackedWindows:
    """Whole-sequence windows; ``targets[b, t]`` is the item following position t, or 0."""

    items: np.ndarray
    targets: np.ndarray


def pack_train_windows(dataset: InteractionDataset, L: int) -> PackedWindows:
    """Cover every training target with left-padded windows of at most ``L`` inputs.

    Targets whose context fits in the first window see exactly the same
    context as the corresponding prefix instance. Later windows restart the
    context at the window boundary.
    """
    rows, tgts = [], []
    for seq in dataset.sequences:
        train = seq[: len(seq) - 2]        # v1..v(n-2); targets are v2..v(n-2)
        inputs, targets = train[:-1], train[1:]
        for s in range(0, len(inputs), L):
            rows.append(left_pad(inputs[s:s + L], L))
            tgts.append(left_pad(targets[s:s + L], L))
    if not rows:
        z = np.zeros((0, L), dtype=np.int64)
        return PackedWindows(z, z.copy())
    return PackedWindows(np.stack(rows), np.stack(tgts))


# ---------------------------------------------------------------------------
# synthetic fixture

def synthetic_markov_records(num_users: int = 100, num_items: int = 50, length: int = 12,
                             seed: int = 0) -> list[InteractionRecord]:
    """Users walk one fixed cycle over the catalogue, so the next item is a function of the last."""
    rng = np.random.default_rng(seed)
    cycle = rng.permutation(num_items)
    succ = np.empty(num_items, dtype=np.int64)
    succ[cycle] = np.roll(cycle, -1)
    records = []
    for u in range(num_users):
        cur = int(rng.integers(num_items))
        for t in range(length):
            records.append(InteractionRecord(f"u{u}", f"i{cur}", 1_000_000 + 60 * t))
            cur = int(succ[cur])
    return records


# ---------------------------------------------------------------------------
# cache

def content_hash(path: str | Path, fmt: str, k: int) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"format": fmt, "k": k}, sort_keys=True).encode())
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def save_dataset(path: str | Path, dataset: InteractionDataset) -> None:
    lengths = np.array([len(s) for s in dataset.sequences], dtype=np.int64)
    flat = np.concatenate(dataset.sequences) if dataset.sequences else np.zeros(0, dtype=np.int64)
    save_tensors(path, {
        "user_ids": encode_text("\n".join(dataset.user_ids)),
        "item_ids": encode_text("\n".join(dataset.item_ids)),
        "lengths": lengths,
        "items": flat,
    })


def load_dataset(path: str | Path) -> InteractionDataset:
    raw = load_tensors(path)
    lengths = raw["lengths"].astype(np.int64)
    flat = raw["items"].astype(np.int64)
    sequences = np.split(flat, np.cumsum(lengths)[:-1]) if len(lengths) else []
    return InteractionDataset(
        decode_text(raw["user_ids"]).split("\n"),
        decode_text(raw["item_ids"]).split("\n"),
        [s.copy() for s in sequences],
    )
