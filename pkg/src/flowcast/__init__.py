"""Multi-channel spatial-temporal transformer for traffic flow forecasting."""

from . import autodiff
from .autodiff import Tensor, backward, grad_check, no_grad
from .data import ChannelBatch, NormStats, SeriesTable, make_channels, split_train_val_test
from .graph import AdjacencyPair, RoadGraph, adaptive_adjacency, build_fixed_adjacency
from .model import (
    AblationFlags,
    ModelConfig,
    ModelParams,
    init_model_params,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)
from .synthetic import SynthSpec, generate
from .training import ForecastReport, TrainConfig, evaluate, ha_baseline, mae_loss, metrics, train

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "Tensor",
    "backward",
    "grad_check",
    "no_grad",
    "ChannelBatch",
    "NormStats",
    "SeriesTable",
    "make_channels",
    "split_train_val_test",
    "AdjacencyPair",
    "RoadGraph",
    "adaptive_adjacency",
    "build_fixed_adjacency",
    "AblationFlags",
    "ModelConfig",
    "ModelParams",
    "init_model_params",
    "load_checkpoint",
    "model_forward",
    "save_checkpoint",
    "SynthSpec",
    "generate",
    "ForecastReport",
    "TrainConfig",
    "evaluate",
    "ha_baseline",
    "mae_loss",
    "metrics",
    "train",
]
