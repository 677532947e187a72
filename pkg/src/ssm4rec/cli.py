"""Command line: prepare, train, eval, bench, ablate.

Exit codes: 0 success, 2 validation failure, 3 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import traceback
from pathlib import Path

from . import data as D
from .bench import run_bench
from .config import RunConfig
from .evaluation import evaluate, write_report
from .model import build_model, load_checkpoint, save_checkpoint
from .numerics import ConfigError, ContractError
from .trainer import train, write_history

log = logging.getLogger("ssm4rec")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


class ValidationFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# dataset cache

def _dataset_key(cfg: RunConfig) -> str:
    ds = cfg.dataset
    k = cfg["data"]["k_core"]
    if ds.startswith("builtin:"):
        return hashlib.sha256(f"{ds}|k={k}".encode()).hexdigest()
    return D.content_hash(ds, cfg["data"]["format"], k)


def _cache_path(cfg: RunConfig) -> Path:
    return Path(cfg["data"]["workdir"]) / "datasets" / f"{_dataset_key(cfg)[:24]}.bin"


def _load_records(cfg: RunConfig) -> list[D.InteractionRecord]:
    ds = cfg.dataset
    if ds == "builtin:markov":
        return D.synthetic_markov_records()
    if ds == "builtin:tiny":
        return D.synthetic_markov_records(num_users=40, num_items=20, length=8)
    if ds.startswith("builtin:"):
        raise ConfigError(f"unknown built-in dataset {ds!r} (have builtin:markov, builtin:tiny)")
    return D.parse_interactions(ds, cfg["data"]["format"])


def prepare_dataset(cfg: RunConfig, force: bool = False) -> tuple[D.InteractionDataset, Path]:
    path = _cache_path(cfg)
    if path.exists() and not force:
        return D.load_dataset(path), path
    records = D.k_core_filter(_load_records(cfg), cfg["data"]["k_core"])
    dataset = D.build_dataset(records)
    D.build_splits(dataset)
    path.parent.mkdir(parents=True, exist_ok=True)
    D.save_dataset(path, dataset)
    return dataset, path


def cached_dataset(cfg: RunConfig) -> D.InteractionDataset:
    path = _cache_path(cfg)
    if not path.exists():
        raise ValidationFailure(f"no prepared dataset at {path}; run `ssm4rec prepare` with the same "
                                f"--dataset/--format/--config first")
    return D.load_dataset(path)


# ---------------------------------------------------------------------------
# commands

def cmd_prepare(cfg: RunConfig, expect: str | None, force: bool) -> int:
    dataset, path = prepare_dataset(cfg, force)
    stats = dataset.stats()
    print(json.dumps({**stats, "cache": str(path), "config_hash": cfg.hash}))
    if expect:
        want = [int(x) for x in expect.split(",")]
        have = [stats["users"], stats["items"], stats["interactions"]][: len(want)]
        if have != want:
            raise ValidationFailure(f"statistics {have} differ from expected {want}")
    return EXIT_OK


def _run_dir(cfg: RunConfig, out: str | None) -> Path:
    d = Path(out) if out else Path(cfg["data"]["workdir"]) / f"run-{cfg.hash}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def train_run(cfg: RunConfig, dataset: D.InteractionDataset, out_dir: Path) -> dict:
    """Train, write checkpoint/history/log/config, and evaluate on the test split."""
    tcfg = cfg.train_config()
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg.model_config(dataset.num_items + 1), tcfg.seed)
    result = train(model, dataset, tcfg, log_path=out_dir / "train_log.jsonl")
    meta = {"config_hash": cfg.hash, "config": cfg.values, "best_epoch": result.best_epoch}
    save_checkpoint(out_dir / "checkpoint.bin", result.model, meta)
    write_history(out_dir / "history.json", result.history)
    (out_dir / "config.ini").write_text(cfg.to_ini())
    e = cfg["eval"]
    report = evaluate(result.model, dataset, e["split"], k=e["k"], mask_history=e["mask_history"],
                      eval_batch=tcfg.eval_batch)
    return write_report(out_dir / "report.json", report, e["split"], dataset.num_users,
                        tcfg.seed, cfg.hash)


def cmd_train(cfg: RunConfig, out: str | None) -> int:
    dataset = cached_dataset(cfg)
    out_dir = _run_dir(cfg, out)
    payload = train_run(cfg, dataset, out_dir)
    print(json.dumps({"run_dir": str(out_dir), **payload}))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str, out: str | None) -> int:
    model, meta = load_checkpoint(checkpoint)
    dataset = cached_dataset(cfg)
    if model.config.vocab_size != dataset.num_items + 1:
        raise ValidationFailure(f"checkpoint vocabulary {model.config.vocab_size} does not match "
                                f"dataset ({dataset.num_items} items + pad)")
    e = cfg["eval"]
    report = evaluate(model, dataset, e["split"], k=e["k"], mask_history=e["mask_history"],
                      eval_batch=cfg["train"]["eval_batch"])
    path = Path(out) if out else Path(checkpoint).with_name(f"eval-{e['split']}-k{e['k']}.json")
    payload = write_report(path, report, e["split"], dataset.num_users, cfg["train"]["seed"],
                           meta.get("config_hash", cfg.hash))
    print(json.dumps(payload))
    return EXIT_OK


def cmd_bench(cfg: RunConfig, lengths: list[int], batch: int, reps: int, out: str | None) -> int:
    m = cfg["model"]
    result = run_bench(lengths, batch=batch, d_model=m["d_model"], state_dim=m["state_dim"],
                       conv_kernel=m["conv_kernel"], expand=m["expand"], reps=reps,
                       seed=cfg["train"]["seed"])
    payload = {**result.as_dict(), "config_hash": cfg.hash}
    text = json.dumps(payload, indent=1)
    if out:
        Path(out).write_text(text + "\n")
    print(result.markdown())
    return EXIT_OK


ABLATIONS = {
    "Default": {},
    "Block Only": {"model.use_pffn": False, "model.use_layernorm": False, "model.dropout_hidden": 0.0},
    "2 Layers": {"model.num_layers": 2},
    "w/ PE": {"model.use_positional_embedding": True},
    "w/o PFFN": {"model.use_pffn": False},
    "w/o LayerNorm": {"model.use_layernorm": False},
}


def ablation_configs(config_path: str | None, overrides: dict) -> dict[str, RunConfig]:
    return {name: RunConfig.load(config_path, {**overrides, **delta}) for name, delta in ABLATIONS.items()}


def cmd_ablate(config_path: str | None, overrides: dict, out: str | None) -> int:
    variants = ablation_configs(config_path, overrides)
    base = variants["Default"]
    dataset = cached_dataset(base)
    out_dir = Path(out) if out else Path(base["data"]["workdir"]) / f"ablate-{base.hash}"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    try:
        for name, cfg in variants.items():
            slug = name.lower().replace("/", "").replace(" ", "-")
            payload = train_run(cfg, dataset, out_dir / slug)
            rows.append({"variant": name, "ndcg": payload["ndcg"], "mrr": payload["mrr"],
                         "hr": payload["hr"], "config_hash": cfg.hash, "dir": slug})
    finally:
        (out_dir / "ablation.json").write_text(json.dumps(rows, indent=1) + "\n")
        lines = [f"| Architecture | NDCG@{base['eval']['k']} | MRR@{base['eval']['k']} |", "|---|---|---|"]
        lines += [f"| {r['variant']} | {r['ndcg']:.4f} | {r['mrr']:.4f} |" for r in rows]
        (out_dir / "ablation.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument handling

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssm4rec", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--dataset", help="interaction file or builtin:markov / builtin:tiny")
        sp.add_argument("--format", choices=D.FORMATS)
        sp.add_argument("--workdir")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key")
        return sp

    sp = common(sub.add_parser("prepare", help="parse, filter and cache a dataset"))
    sp.add_argument("--k", type=int, help="k-core threshold (default 5)")
    sp.add_argument("--expect", help="users,items,interactions that must match")
    sp.add_argument("--force-rebuild", action="store_true")

    for name, text in (("train", "train one model, then evaluate it"),
                       ("ablate", "train the six architecture variants and tabulate them")):
        sp = common(sub.add_parser(name, help=text))
        sp.add_argument("--num-layers", type=int)
        sp.add_argument("--use-pe", action="store_true")
        sp.add_argument("--no-pffn", action="store_true")
        sp.add_argument("--no-layernorm", action="store_true")
        sp.add_argument("--mask-history", action=argparse.BooleanOptionalAction, default=None)
        sp.add_argument("--out")

    sp = common(sub.add_parser("eval", help="score a checkpoint on a prepared dataset"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("valid", "test"))
    sp.add_argument("--k", type=int)
    sp.add_argument("--mask-history", action=argparse.BooleanOptionalAction, default=None)
    sp.add_argument("--out")

    sp = common(sub.add_parser("bench", help="time a Mamba layer against causal attention over L"))
    sp.add_argument("--lengths", default="64,128,256,512,1024")
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--out")
    return p


def _overrides(args) -> dict:
    o: dict[str, object] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        o[key.strip()] = value.strip()
    simple = {"seed": "train.seed", "dataset": "data.dataset", "format": "data.format",
              "workdir": "data.workdir", "num_layers": "model.num_layers", "split": "eval.split"}
    for attr, key in simple.items():
        if getattr(args, attr, None) is not None:
            o[key] = getattr(args, attr)
    if args.command == "prepare" and args.k is not None:
        o["data.k_core"] = args.k
    if args.command == "eval" and args.k is not None:
        o["eval.k"] = args.k
    if getattr(args, "use_pe", False):
        o["model.use_positional_embedding"] = True
    if getattr(args, "no_pffn", False):
        o["model.use_pffn"] = False
    if getattr(args, "no_layernorm", False):
        o["model.use_layernorm"] = False
    if getattr(args, "mask_history", None) is not None:
        o["eval.mask_history"] = args.mask_history
    return o


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = _parser().parse_args(argv)
    try:
        overrides = _overrides(args)
        if args.command == "ablate":
            return cmd_ablate(args.config, overrides, args.out)
        cfg = RunConfig.load(args.config, overrides)
        if args.command == "prepare":
            return cmd_prepare(cfg, args.expect, args.force_rebuild)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.out)
        if args.command == "bench":
            lengths = [int(x) for x in args.lengths.split(",") if x]
            if args.batch < 1:
                raise ConfigError("--batch must be >= 1")
            return cmd_bench(cfg, lengths, args.batch, args.reps, args.out)
    except (ValidationFailure, ConfigError, ContractError, D.ParseError, D.EmptyDatasetError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001
        traceback.print_exc()
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
