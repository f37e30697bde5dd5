"""Loss, metrics, baseline, optimizer, and the early-stopped training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import ChannelBatch, NormStats, SeriesTable, compute_norm_stats, make_channels, split_train_val_test, zscore
from .errors import ConfigError, ShapeError, TrainingDiverged
from .graph import AdjacencyPair, RoadGraph, build_fixed_adjacency
from .model import AblationFlags, ModelConfig, ModelParams, init_model_params, model_forward

log = logging.getLogger(__name__)

REPORT_STEPS = (3, 6, 12)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 15
    seed: int = 0
    mape_epsilon: float = 1.0
    min_delta: float = 1e-6      # smallest validation-MAE drop that counts as improvement
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass
class StepMetrics:
    mae: float
    mape: float
    rmse: float


@dataclass
class ForecastReport:
    """Per-horizon-step and averaged error metrics in original units."""

    per_step: dict[int, StepMetrics]
    average: StepMetrics
    horizon: int
    dataset_tag: str = ""
    wall_clock_s: float = 0.0

    def rows(self) -> list[tuple[str, float, float, float]]:
        out = [(str(s), m.mae, m.mape, m.rmse) for s, m in sorted(self.per_step.items())]
        out.append(("avg", self.average.mae, self.average.mape, self.average.rmse))
        return out


@dataclass
class EpochRecord:
    epoch: int
    train_mae: float
    val_mae: float
    elapsed_s: float


def mae_loss(pred: ad.Tensor, target) -> ad.Tensor:
    """Mean absolute deviation; subgradient 0 at exact ties."""
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return ad.tensor_mean(ad.absolute(ad.sub(pred, target)))


def metrics(pred: np.ndarray, target: np.ndarray, mape_epsilon: float = 1.0) -> StepMetrics:
    """MAE / MAPE(%) / RMSE; MAPE skips near-zero targets and is NaN if all are."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    err = pred - target
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err * err).mean()))
    mask = np.abs(target) > mape_epsilon
    if mask.any():
        mape = float((np.abs(err[mask] / target[mask])).mean() * 100.0)
    else:
        mape = float("nan")
    return StepMetrics(mae=mae, mape=mape, rmse=rmse)


def ha_baseline(batch: ChannelBatch, weights=None) -> np.ndarray:
    """Weighted mean of the hour-channel history, repeated across the horizon."""
    p = batch.x_hour.shape[-2]
    if weights is None:
        weights = np.full(p, 1.0 / p)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (p,):
        raise ConfigError(f"need {p} weights, got shape {weights.shape}")
    if (weights < 0).any() or abs(weights.sum() - 1.0) > 1e-9:
        raise ConfigError("weights must be nonnegative and sum to 1")
    level = np.tensordot(batch.x_hour, weights, axes=([-2], [0]))  # (..., nodes, 1)
    q = batch.y.shape[-2]
    return np.repeat(level[..., None, :], q, axis=-2)


def adam_step(
    params: ModelParams,
    state: dict[str, tuple[np.ndarray, np.ndarray]],
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One adaptive-moment update over every named parameter (in place)."""
    for name, tensor in params.named().items():
        grad = tensor.grad
        if grad is None:
            grad = np.zeros_like(tensor.data)
        m, v = state.setdefault(name, (np.zeros_like(tensor.data), np.zeros_like(tensor.data)))
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        state[name] = (m, v)
        m_hat = m / (1 - beta1**step)
        v_hat = v / (1 - beta2**step)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord]
    best_epoch: int
    best_val_mae: float
    stats: NormStats
    splits: tuple[list[int], list[int], list[int]]
    adjacency: AdjacencyPair


def _batched_forecast(
    params: ModelParams,
    cfg: ModelConfig,
    adj: AdjacencyPair,
    table: SeriesTable,
    anchors: list[int],
    chunk: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Model forecasts and targets for the anchors, in the table's units."""
    preds, targets = [], []
    with ad.no_grad():
        for lo in range(0, len(anchors), chunk):
            batch = make_channels(table, anchors[lo : lo + chunk], cfg)
            preds.append(model_forward(batch, params, cfg, adj).data)
            targets.append(batch.y)
    return np.concatenate(preds), np.concatenate(targets)


def train(
    table: SeriesTable,
    graph: RoadGraph,
    cfg: ModelConfig,
    tcfg: TrainConfig,
    sigma: float | None = None,
    kappa: float = 0.1,
) -> TrainResult:
    """Mini-batch training with validation-based early stopping.

    Deterministic given the seed: parameter init, batch order, and updates all
    derive from one generator. Aborts with a diagnostic on non-finite loss.
    """
    splits = split_train_val_test(table, cfg)
    train_anchors, val_anchors, _ = splits
    stats = compute_norm_stats(table, train_boundary_row=val_anchors[0])
    normed = zscore(table, stats)
    adj = build_fixed_adjacency(graph, sigma=sigma, kappa=kappa)

    params = init_model_params(cfg, seed=tcfg.seed, ablation=tcfg.ablation)
    rng = np.random.default_rng(tcfg.seed)
    adam_state: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    history: list[EpochRecord] = []
    best_state = params.copy_state()
    best_val = float("inf")
    best_epoch = 0
    stale = 0
    step = 0
    started = time.perf_counter()

    for epoch in range(1, tcfg.max_epochs + 1):
        order = rng.permutation(len(train_anchors))
        epoch_abs_err = 0.0
        epoch_count = 0
        for batch_no, lo in enumerate(range(0, len(order), tcfg.batch_size), start=1):
            picked = [train_anchors[i] for i in order[lo : lo + tcfg.batch_size]]
            batch = make_channels(normed, picked, cfg)
            params.zero_grads()
            pred = model_forward(batch, params, cfg, adj)
            loss = mae_loss(pred, batch.y)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}"
                )
            ad.backward(loss)
            step += 1
            adam_step(params, adam_state, step, tcfg.lr)
            epoch_abs_err += loss_val * len(picked)
            epoch_count += len(picked)

        train_mae = (epoch_abs_err / epoch_count) * stats.std  # back to original units
        val_pred, val_target = _batched_forecast(params, cfg, adj, normed, val_anchors)
        val_mae = float(np.abs(val_pred - val_target).mean()) * stats.std
        elapsed = time.perf_counter() - started
        history.append(EpochRecord(epoch, train_mae, val_mae, elapsed))
        log.info("epoch %d: train MAE %.4f, val MAE %.4f", epoch, train_mae, val_mae)

        if val_mae < best_val - tcfg.min_delta:
            best_val = val_mae
            best_epoch = epoch
            best_state = params.copy_state()
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                log.info("no improvement for %d epochs; stopping", stale)
                break

    params.load_arrays(best_state)
    return TrainResult(
        params=params,
        history=history,
        best_epoch=best_epoch,
        best_val_mae=best_val,
        stats=stats,
        splits=splits,
        adjacency=adj,
    )


def evaluate(
    params: ModelParams,
    cfg: ModelConfig,
    adj: AdjacencyPair,
    table_normed: SeriesTable,
    anchors: list[int],
    stats: NormStats,
    mape_epsilon: float = 1.0,
    steps: tuple[int, ...] = REPORT_STEPS,
    dataset_tag: str = "",
    input_table: SeriesTable | None = None,
) -> ForecastReport:
    """Metrics at the requested horizon steps plus the all-steps average.

    ``input_table`` (when given) supplies the model inputs while targets still
    come from the clean table — used for noise-robustness runs.
    """
    started = time.perf_counter()
    if input_table is None:
        pred_n, target_n = _batched_forecast(params, cfg, adj, table_normed, anchors)
    else:
        pred_n, _ = _batched_forecast(params, cfg, adj, input_table, anchors)
        target_n = make_channels(table_normed, anchors, cfg).y
    pred = pred_n * stats.std + stats.mean
    target = target_n * stats.std + stats.mean
    return report_from_forecast(
        pred, target, cfg.horizon, mape_epsilon, steps, dataset_tag,
        wall_clock_s=time.perf_counter() - started,
    )


def report_from_forecast(
    pred: np.ndarray,
    target: np.ndarray,
    horizon: int,
    mape_epsilon: float = 1.0,
    steps: tuple[int, ...] = REPORT_STEPS,
    dataset_tag: str = "",
    wall_clock_s: float = 0.0,
) -> ForecastReport:
    """Build a report from denormalized (batch, nodes, horizon, 1) arrays."""
    per_step = {}
    for s in steps:
        if s <= horizon:
            per_step[s] = metrics(pred[..., s - 1, :], target[..., s - 1, :], mape_epsilon)
    average = metrics(pred, target, mape_epsilon)
    return ForecastReport(
        per_step=per_step,
        average=average,
        horizon=horizon,
        dataset_tag=dataset_tag,
        wall_clock_s=wall_clock_s,
    )
