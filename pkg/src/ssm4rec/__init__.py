"""Selective state-space sequential recommender, built on a small numpy autodiff core."""

from .data import InteractionDataset, build_dataset, build_splits, k_core_filter, parse_interactions
from .evaluation import MetricsReport, evaluate, metrics_at_k, rank_target
from .mamba_block import BlockConfig, mamba_block_forward
from .model import Model, ModelConfig, build_model, load_checkpoint, model_forward, predict_scores, save_checkpoint
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BlockConfig", "InteractionDataset", "MetricsReport", "Model", "ModelConfig", "TrainConfig",
    "build_dataset", "build_model", "build_splits", "evaluate", "k_core_filter", "load_checkpoint",
    "mamba_block_forward", "metrics_at_k", "model_forward", "parse_interactions", "predict_scores",
    "rank_target", "save_checkpoint", "train",
]
