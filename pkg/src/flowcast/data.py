"""Series/edge ingestion, channel windowing, splitting, normalization, noise.

The hour channel of an anchor t holds the p consecutive slices ending at t;
the day channel holds the same slice offset on each of the d prior days;
the target covers slices t+1 .. t+q.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, WindowError
from .graph import RoadGraph
from .model import ModelConfig

log = logging.getLogger(__name__)

SERIES_INDEX_COLUMN = "slice_index"
EDGES_HEADER = ["from", "to", "distance"]


@dataclass
class SeriesTable:
    """Dense measurement matrix: rows are time slices, columns are nodes."""

    values: np.ndarray          # (T_total, nodes) float64
    start_index: int = 0        # absolute slice index of row 0
    slices_per_day: int = 288

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise IngestionError(f"series table must be 2-d, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise IngestionError("series table contains non-finite values")

    @property
    def total_slices(self) -> int:
        return self.values.shape[0]

    @property
    def node_count(self) -> int:
        return self.values.shape[1]


@dataclass
class ChannelBatch:
    """Stacked hour/day input windows with targets and absolute time indices."""

    x_hour: np.ndarray          # (batch, nodes, p, 1)
    x_day: np.ndarray           # (batch, nodes, d, 1)
    y: np.ndarray               # (batch, nodes, q, 1)
    hour_time_index: np.ndarray  # (batch, p)
    day_time_index: np.ndarray   # (batch, d)

    def __len__(self) -> int:
        return self.x_hour.shape[0]

    def sample(self, i: int) -> "ChannelBatch":
        """Single-sample view without the leading batch axis."""
        return ChannelBatch(
            x_hour=self.x_hour[i],
            x_day=self.x_day[i],
            y=self.y[i],
            hour_time_index=self.hour_time_index[i],
            day_time_index=self.day_time_index[i],
        )


@dataclass
class NormStats:
    """Scalar z-score statistics computed on the training portion only."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ConfigError(f"normalization std must be positive, got {self.std}")


def load_series_csv(path, slices_per_day: int = 288) -> SeriesTable:
    """Read a `slice_index,node_0,...` CSV; slice indices must be consecutive."""
    path = Path(path)
    rows: list[list[float]] = []
    start_index: int | None = None
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        if not header or header[0] != SERIES_INDEX_COLUMN:
            raise IngestionError(
                f"{path}: first column must be '{SERIES_INDEX_COLUMN}', got {header[:1]}"
            )
        node_cols = header[1:]
        if not node_cols or any(not c.startswith("node_") for c in node_cols):
            raise IngestionError(f"{path}: node columns must be named node_<id>")
        expected: int | None = None
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise IngestionError(
                    f"{path}:{line_no}: expected {len(header)} cells, got {len(row)}"
                )
            try:
                idx = int(row[0])
            except ValueError:
                raise IngestionError(
                    f"{path}:{line_no}: non-integer slice index {row[0]!r}"
                ) from None
            if expected is None:
                start_index = idx
            elif idx != expected:
                if idx > expected:
                    raise IngestionError(f"{path}: missing slice {expected}")
                raise IngestionError(
                    f"{path}:{line_no}: slice index {idx} out of order (expected {expected})"
                )
            expected = idx + 1
            try:
                rows.append([float(cell) for cell in row[1:]])
            except ValueError:
                bad = next(
                    (col for col, cell in zip(node_cols, row[1:]) if not _is_float(cell))
                )
                raise IngestionError(
                    f"{path}:{line_no}: non-numeric value in column {bad}"
                ) from None
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    return SeriesTable(
        values=np.array(rows, dtype=np.float64),
        start_index=int(start_index),
        slices_per_day=slices_per_day,
    )


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def load_edges_csv(path, node_count: int) -> RoadGraph:
    """Read a `from,to,distance` CSV; a duplicated edge keeps its last distance."""
    path = Path(path)
    seen: dict[tuple[int, int], float] = {}
    order: list[tuple[int, int]] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        if [h.strip() for h in header] != EDGES_HEADER:
            raise IngestionError(f"{path}: header must be {','.join(EDGES_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise IngestionError(f"{path}:{line_no}: expected 3 cells, got {len(row)}")
            try:
                src, dst, dist = int(row[0]), int(row[1]), float(row[2])
            except ValueError:
                raise IngestionError(f"{path}:{line_no}: malformed edge row {row}") from None
            if not (0 <= src < node_count and 0 <= dst < node_count):
                raise IngestionError(
                    f"{path}:{line_no}: unknown node id in edge ({src}, {dst}); "
                    f"valid ids are 0..{node_count - 1}"
                )
            key = (src, dst)
            if key in seen:
                log.warning("%s:%d: duplicate edge (%d, %d); last occurrence wins", path, line_no, src, dst)
            else:
                order.append(key)
            seen[key] = dist
    edges = [(src, dst, seen[(src, dst)]) for src, dst in order]
    return RoadGraph(node_count=node_count, edges=edges)


def valid_anchor_range(table: SeriesTable, cfg: ModelConfig) -> range:
    """Row indices t with full hour/day lookback and a full target window."""
    lo = max(cfg.hour_window - 1, cfg.day_window * cfg.slices_per_day)
    hi = table.total_slices - cfg.horizon  # exclusive
    return range(lo, hi)


def make_channels(table: SeriesTable, anchors, cfg: ModelConfig) -> ChannelBatch:
    """Extract both channel windows and targets for each anchor row."""
    anchors = np.asarray(list(anchors), dtype=np.int64)
    valid = valid_anchor_range(table, cfg)
    bad = anchors[(anchors < valid.start) | (anchors >= valid.stop)]
    if bad.size:
        raise WindowError(
            f"anchor {int(bad[0])} outside usable range [{valid.start}, {valid.stop})"
        )
    p, d, q, s = cfg.hour_window, cfg.day_window, cfg.horizon, cfg.slices_per_day
    hour_rows = anchors[:, None] + np.arange(-p + 1, 1)[None, :]          # (B, p)
    day_rows = anchors[:, None] + (np.arange(-d, 0) * s)[None, :]         # (B, d)
    target_rows = anchors[:, None] + np.arange(1, q + 1)[None, :]         # (B, q)

    def windows(rows: np.ndarray) -> np.ndarray:
        # (B, T, nodes) -> (B, nodes, T, 1)
        vals = table.values[rows]
        return vals.swapaxes(1, 2)[..., None]

    return ChannelBatch(
        x_hour=windows(hour_rows),
        x_day=windows(day_rows),
        y=windows(target_rows),
        hour_time_index=hour_rows + table.start_index,
        day_time_index=day_rows + table.start_index,
    )


def split_train_val_test(
    table: SeriesTable, cfg: ModelConfig, ratios: tuple[int, int, int] = (6, 2, 2)
) -> tuple[list[int], list[int], list[int]]:
    """Chronological split of the valid anchors.

    The anchor list is partitioned by the given ratios; any window whose
    target range would reach into the next partition's anchor slices is then
    dropped entirely, so target slices never leak across splits.
    """
    anchors = list(valid_anchor_range(table, cfg))
    total = sum(ratios)
    n = len(anchors)
    n_train = n * ratios[0] // total
    n_val = n * ratios[1] // total
    if n_train == 0 or n_val == 0 or n - n_train - n_val == 0:
        raise ConfigError(
            f"table too short: only {n} valid anchors for a {ratios} split"
        )
    train = anchors[:n_train]
    val = anchors[n_train : n_train + n_val]
    test = anchors[n_train + n_val :]
    q = cfg.horizon
    train = [t for t in train if t + q < val[0]]
    val = [t for t in val if t + q < test[0]]
    if not train or not val:
        raise ConfigError(
            "table too short: boundary exclusion emptied a split "
            f"(counts {len(train)}/{len(val)}/{len(test)})"
        )
    return train, val, test


def compute_norm_stats(table: SeriesTable, train_boundary_row: int) -> NormStats:
    """Mean/std over rows strictly before the first validation anchor."""
    portion = table.values[:train_boundary_row]
    if portion.size == 0:
        raise ConfigError("empty training portion for normalization")
    std = float(portion.std())
    if std == 0:
        raise ConfigError("training portion has zero variance; cannot z-score")
    return NormStats(mean=float(portion.mean()), std=std)


def zscore(table: SeriesTable, stats: NormStats, direction: str = "normalize") -> SeriesTable:
    """Apply or invert (x - mean) / std on the whole table."""
    if direction == "normalize":
        values = (table.values - stats.mean) / stats.std
    elif direction == "denormalize":
        values = table.values * stats.std + stats.mean
    else:
        raise ConfigError(f"direction must be normalize/denormalize, got {direction!r}")
    return replace(table, values=values)


def inject_noise(
    table: SeriesTable, mean: float = 0.0, std: float = 0.01, seed: int = 0
) -> SeriesTable:
    """Seeded Gaussian perturbation of every value (for robustness runs)."""
    if std < 0:
        raise ConfigError(f"noise std must be nonnegative, got {std}")
    rng = np.random.default_rng(seed)
    noise = rng.normal(mean, std, size=table.values.shape) if std > 0 else mean
    return replace(table, values=table.values + noise)
