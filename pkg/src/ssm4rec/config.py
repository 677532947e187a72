"""Run configuration: INI-style ``key = value`` sections plus command-line overrides."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .mamba_block import BlockConfig
from .model import ModelConfig
from .numerics import ConfigError
from .trainer import TrainConfig

# typed defaults, section -> key -> value
DEFAULTS: dict[str, dict] = {
    "data": {"dataset": "builtin:markov", "format": "ml-1m", "k_core": 5, "workdir": "runs"},
    "model": {
        "d_model": 64, "state_dim": 32, "conv_kernel": 4, "expand": 2,
        "num_layers": 1, "use_positional_embedding": False, "use_pffn": True,
        "use_layernorm": True, "dropout_embed": None, "dropout_hidden": None, "max_len": None,
    },
    "train": {
        "lr": 1e-3, "train_batch": 2048, "eval_batch": 4096, "max_epochs": 100,
        "patience": 10, "seed": 2024, "micro_batch": 64, "layout": "prefix",
    },
    "eval": {"k": 10, "mask_history": True, "split": "test"},
}

# dropout / max_len follow the dataset when not set explicitly
PER_FORMAT = {
    "ml-1m": {"dropout": 0.2, "max_len": 200},
    "amazon-csv": {"dropout": 0.4, "max_len": 50},
    "tsv": {"dropout": 0.2, "max_len": 50},
    "builtin": {"dropout": 0.2, "max_len": 50},
}

_TYPES = {
    "d_model": int, "state_dim": int, "conv_kernel": int, "expand": int, "num_layers": int,
    "max_len": int, "k_core": int, "train_batch": int, "eval_batch": int, "max_epochs": int,
    "patience": int, "seed": int, "micro_batch": int, "k": int,
    "lr": float, "dropout_embed": float, "dropout_hidden": float,
    "use_positional_embedding": bool, "use_pffn": bool, "use_layernorm": bool, "mask_history": bool,
}


def _coerce(key: str, value):
    kind = _TYPES.get(key, str)
    if value is None or isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None


@dataclass
class RunConfig:
    values: dict[str, dict]

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict[str, object] | None = None) -> "RunConfig":
        """Defaults, then the file, then ``section.key`` overrides. Unknown keys are rejected."""
        values = {s: dict(kv) for s, kv in DEFAULTS.items()}
        if path is not None:
            parser = configparser.ConfigParser()
            if not parser.read(path):
                raise ConfigError(f"cannot read config file {path}")
            for section in parser.sections():
                if section not in values:
                    raise ConfigError(f"unknown section [{section}]")
                for key, raw in parser.items(section):
                    cls._set(values, section, key, raw)
        for dotted, raw in (overrides or {}).items():
            section, _, key = dotted.partition(".")
            if section not in values or not key:
                raise ConfigError(f"unknown key {dotted!r}")
            cls._set(values, section, key, raw)
        cfg = cls(values)
        cfg._fill_dataset_defaults()
        return cfg

    @staticmethod
    def _set(values, section, key, raw):
        if key not in values[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        values[section][key] = _coerce(key, raw)

    def _fill_dataset_defaults(self) -> None:
        fam = "builtin" if self.dataset.startswith("builtin:") else self["data"]["format"]
        if fam not in PER_FORMAT:
            raise ConfigError(f"unknown data format {fam!r}")
        d = PER_FORMAT[fam]
        m = self["model"]
        for key in ("dropout_embed", "dropout_hidden"):
            if m[key] is None:
                m[key] = d["dropout"]
        if m["max_len"] is None:
            m["max_len"] = d["max_len"]

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def dataset(self) -> str:
        return str(self["data"]["dataset"])

    def model_config(self, vocab_size: int) -> ModelConfig:
        m = self["model"]
        return ModelConfig(
            vocab_size=vocab_size,
            max_len=m["max_len"],
            num_layers=m["num_layers"],
            use_positional_embedding=m["use_positional_embedding"],
            use_pffn=m["use_pffn"],
            use_layernorm=m["use_layernorm"],
            dropout_embed=m["dropout_embed"],
            dropout_hidden=m["dropout_hidden"],
            block=BlockConfig(m["d_model"], m["state_dim"], m["conv_kernel"], m["expand"]),
        )

    def train_config(self) -> TrainConfig:
        t = self["train"]
        return TrainConfig(mask_history=self["eval"]["mask_history"], **t)

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        lines = []
        for section, kv in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in kv.items()]
            lines.append("")
        return "\n".join(lines)
