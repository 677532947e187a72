"""Next-item recommender built from selective-SSM layers.

items (B, L) -> embedding -> [+ positions] -> dropout -> layer norm
       -> Mamba layers (block, feed-forward, dropout, layer norm, residual if stacked)
       -> hidden state at the last position -> logits against the item table.

Index 0 is the pad token. Sequences are left-padded, so position L-1 always
holds the most recent real item.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .container import decode_text, encode_text, load_tensors, save_tensors
from .mamba_block import BlockConfig, MambaBlockParams, init_block_params, mamba_block_forward
from .numerics import ContractError, Tensor
from .ssm import BLOCK_METHOD

LN_EPS = 1e-12
EMBED_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int                      # number of items + 1 (pad)
    max_len: int = 200
    num_layers: int = 1
    use_positional_embedding: bool = False
    use_pffn: bool = True
    use_layernorm: bool = True
    dropout_embed: float = 0.2
    dropout_hidden: float = 0.2
    block: BlockConfig = field(default_factory=BlockConfig)

    def __post_init__(self):
        if self.num_layers < 1 or self.max_len < 1 or self.vocab_size < 2:
            raise nx.ConfigError("need num_layers >= 1, max_len >= 1, vocab_size >= 2")
        for p in (self.dropout_embed, self.dropout_hidden):
            if not 0.0 <= p < 1.0:
                raise nx.ConfigError(f"dropout probability {p} outside [0, 1)")

    @property
    def d_model(self) -> int:
        return self.block.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["block"] = BlockConfig(**d["block"])
        return cls(**d)


@dataclass
class LayerParams:
    block: MambaBlockParams
    ffn: dict[str, Tensor] | None       # w1 (D,4D), b1, w2 (4D,D), b2
    ln_block: tuple[Tensor, Tensor] | None
    ln_ffn: tuple[Tensor, Tensor] | None


@dataclass
class ModelParams:
    item_embedding: Tensor
    embed_ln: tuple[Tensor, Tensor]
    layers: list[LayerParams]
    pos_embedding: Tensor | None = None

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"item_embedding": self.item_embedding}
        if self.pos_embedding is not None:
            out["pos_embedding"] = self.pos_embedding
        out["embed_ln.gamma"], out["embed_ln.beta"] = self.embed_ln
        for i, lp in enumerate(self.layers):
            pre = f"layers.{i}"
            for k, t in lp.block.named_tensors().items():
                out[f"{pre}.block.{k}"] = t
            if lp.ln_block is not None:
                out[f"{pre}.ln_block.gamma"], out[f"{pre}.ln_block.beta"] = lp.ln_block
            if lp.ffn is not None:
                for k, t in lp.ffn.items():
                    out[f"{pre}.ffn.{k}"] = t
            if lp.ln_ffn is not None:
                out[f"{pre}.ln_ffn.gamma"], out[f"{pre}.ln_ffn.beta"] = lp.ln_ffn
        return out


@dataclass
class Model:
    config: ModelConfig
    params: ModelParams


def _param(arr, name) -> Tensor:
    return Tensor(np.asarray(arr, dtype=nx.default_dtype()), requires_grad=True, name=name)


def _ln_pair(D, name) -> tuple[Tensor, Tensor]:
    return _param(np.ones(D), f"{name}.gamma"), _param(np.zeros(D), f"{name}.beta")


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Parameters keyed by name; each tensor has its own random stream."""
    D = cfg.d_model
    emb = nx.make_rng(seed, "item_embedding").normal(0.0, EMBED_STD, size=(cfg.vocab_size, D))
    emb[0] = 0.0
    pos = None
    if cfg.use_positional_embedding:
        pos = _param(nx.make_rng(seed, "pos_embedding").normal(0.0, EMBED_STD, size=(cfg.max_len, D)),
                     "pos_embedding")
    layers = []
    for i in range(cfg.num_layers):
        pre = f"layers.{i}"
        ffn = None
        if cfg.use_pffn:
            bound1, bound2 = 1.0 / np.sqrt(D), 1.0 / np.sqrt(4 * D)
            ffn = {
                "w1": _param(nx.make_rng(seed, f"{pre}.ffn.w1").uniform(-bound1, bound1, (D, 4 * D)), f"{pre}.ffn.w1"),
                "b1": _param(np.zeros(4 * D), f"{pre}.ffn.b1"),
                "w2": _param(nx.make_rng(seed, f"{pre}.ffn.w2").uniform(-bound2, bound2, (4 * D, D)), f"{pre}.ffn.w2"),
                "b2": _param(np.zeros(D), f"{pre}.ffn.b2"),
            }
        layers.append(LayerParams(
            block=init_block_params(cfg.block, seed, prefix=f"{pre}.block"),
            ffn=ffn,
            ln_block=_ln_pair(D, f"{pre}.ln_block") if cfg.use_layernorm else None,
            ln_ffn=_ln_pair(D, f"{pre}.ln_ffn") if cfg.use_layernorm and cfg.use_pffn else None,
        ))
    return ModelParams(
        item_embedding=_param(emb, "item_embedding"),
        embed_ln=_ln_pair(D, "embed_ln"),
        layers=layers,
        pos_embedding=pos,
    )


def build_model(cfg: ModelConfig, seed: int) -> Model:
    return Model(cfg, init_params(cfg, seed))


# ---------------------------------------------------------------------------
# forward

def _mask(items: np.ndarray, dtype) -> np.ndarray:
    return (items != 0).astype(dtype)[..., None]


def embed_sequence(items: np.ndarray, params: ModelParams, cfg: ModelConfig,
                   rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Lookup, optional positions, dropout, layer norm; pad positions come out as zeros."""
    items = np.asarray(items)
    if items.size and (items.min() < 0 or items.max() >= cfg.vocab_size):
        raise IndexError(f"item index outside [0, {cfg.vocab_size})")
    h = nx.embedding(params.item_embedding, items)
    if cfg.use_positional_embedding:
        L = items.shape[1]
        if L > cfg.max_len:
            raise nx.DimensionError(f"sequence length {L} exceeds max_len {cfg.max_len}")
        h = h + params.pos_embedding[cfg.max_len - L:]
    h = nx.dropout(h, cfg.dropout_embed, rng, training)
    h = nx.layer_norm(h, *params.embed_ln, eps=LN_EPS)
    return h * _mask(items, h.dtype)


def pffn_forward(h: Tensor, ffn: dict[str, Tensor]) -> Tensor:
    inner = nx.gelu(nx.matmul(h, ffn["w1"]) + ffn["b1"])
    return nx.matmul(inner, ffn["w2"]) + ffn["b2"]


def mamba_layer_forward(h: Tensor, layer_index: int, params: ModelParams, cfg: ModelConfig,
                        rng: np.random.Generator | None = None, training: bool = False,
                        items: np.ndarray | None = None, method: str = BLOCK_METHOD) -> Tensor:
    """Block and feed-forward sublayers, each followed by dropout and layer norm.

    A single layer has no residual adds; stacked layers add the sublayer input
    back before each norm.
    """
    lp = params.layers[layer_index]
    residual = cfg.num_layers > 1
    mask = None if items is None else (np.asarray(items) != 0)

    def finish(inp, out, ln):
        out = nx.dropout(out, cfg.dropout_hidden, rng, training)
        if residual:
            out = inp + out
        if ln is not None:
            out = nx.layer_norm(out, *ln, eps=LN_EPS)
        if mask is not None:
            out = out * mask[..., None].astype(out.dtype)
        return out

    h = finish(h, mamba_block_forward(h, lp.block, mask=mask, method=method), lp.ln_block)
    if lp.ffn is not None:
        h = finish(h, pffn_forward(h, lp.ffn), lp.ln_ffn)
    return h


def model_hidden(items: np.ndarray, model: Model, rng: np.random.Generator | None = None,
                 training: bool = False, method: str = BLOCK_METHOD) -> Tensor:
    """Hidden states at every position, (B, L, D)."""
    cfg, params = model.config, model.params
    items = np.asarray(items)
    h = embed_sequence(items, params, cfg, rng, training)
    for i in range(cfg.num_layers):
        h = mamba_layer_forward(h, i, params, cfg, rng, training, items=items, method=method)
    return h


def model_forward(items: np.ndarray, model: Model, rng: np.random.Generator | None = None,
                  training: bool = False, method: str = BLOCK_METHOD) -> Tensor:
    """Hidden state at the final position, (B, D)."""
    items = np.asarray(items)
    if items.ndim != 2 or np.any(items[:, -1] == 0):
        raise ContractError("every row needs a real item in its last (most recent) position")
    return model_hidden(items, model, rng, training, method)[:, -1]


def logits(h: Tensor, params: ModelParams) -> Tensor:
    """Scores against the tied item table, pad column included."""
    return nx.matmul(h, nx.transpose(params.item_embedding, (1, 0)))


def predict_scores(h: Tensor | np.ndarray, params: ModelParams, probabilities: bool = False) -> np.ndarray:
    """Ranking scores with the pad column at -inf, or a softmax over real items."""
    hv = h.data if isinstance(h, Tensor) else np.asarray(h)
    s = hv @ params.item_embedding.data.T
    if probabilities:
        p = np.zeros_like(s)
        z = s[:, 1:] - s[:, 1:].max(axis=1, keepdims=True)
        e = np.exp(z)
        p[:, 1:] = e / e.sum(axis=1, keepdims=True)
        return p
    s[:, 0] = -np.inf
    return s


# ---------------------------------------------------------------------------
# checkpoints

CONFIG_KEY = "__config__"


def save_checkpoint(path: str | Path, model: Model, extra: dict | None = None) -> None:
    payload = {"model": model.config.to_dict(), **(extra or {})}
    tensors = {CONFIG_KEY: encode_text(json.dumps(payload, sort_keys=True))}
    tensors.update({k: t.data for k, t in model.params.named_tensors().items()})
    save_tensors(path, tensors)


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    raw = load_tensors(path)
    if CONFIG_KEY not in raw:
        raise ContractError(f"{path}: no embedded config")
    payload = json.loads(decode_text(raw.pop(CONFIG_KEY)))
    cfg = ModelConfig.from_dict(payload.pop("model"))
    with nx.precision(np.float32):
        model = build_model(cfg, seed=0)
    named = model.params.named_tensors()
    if set(named) != set(raw):
        raise ContractError(f"{path}: tensor names do not match config "
                            f"(missing {sorted(set(named) - set(raw))}, extra {sorted(set(raw) - set(named))})")
    for k, t in named.items():
        if t.shape != raw[k].shape:
            raise ContractError(f"{path}: {k} has shape {raw[k].shape}, config expects {t.shape}")
        t.data = raw[k]
    return model, payload
