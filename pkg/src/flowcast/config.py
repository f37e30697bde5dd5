"""Key-value run configuration: `section.key = value` files plus overrides.

Every key is validated against the schema below; unknown keys are rejected so
experiment files stay diff-friendly and typo-safe.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import AblationFlags, ModelConfig
from .training import TrainConfig

# key -> (type, default). Paths stay strings; 0 means "derive automatically"
# where noted.
SCHEMA: dict[str, tuple[type, object]] = {
    "data.series": (str, ""),
    "data.edges": (str, ""),
    "data.out_dir": (str, "out"),
    "model.hour_window": (int, 12),
    "model.day_window": (int, 7),
    "model.horizon": (int, 12),
    "model.slices_per_day": (int, 288),
    "model.feat_dim": (int, 64),
    "model.blocks": (int, 2),
    "model.heads": (int, 4),
    "model.adaptive_rank": (int, 10),
    "model.ff_dim": (int, 0),        # 0 -> 4 * feat_dim
    "model.mid_dim": (int, 0),       # 0 -> feat_dim // 2
    "graph.sigma": (float, 0.0),     # 0 -> std of edge distances
    "graph.kappa": (float, 0.1),
    "train.lr": (float, 1e-4),
    "train.batch_size": (int, 64),
    "train.max_epochs": (int, 200),
    "train.patience": (int, 15),
    "train.seed": (int, 0),
    "train.min_delta": (float, 1e-6),
    "train.ablate": (str, ""),
    "eval.checkpoint": (str, ""),
    "eval.mape_epsilon": (float, 1.0),
    "eval.noise_std": (float, 0.0),
    "eval.noise_seed": (int, 0),
    "eval.anchor": (int, -1),        # -1 -> last test anchor
    "gradcheck.tol": (float, 0.0),   # 0 -> per-check defaults
}


def _convert(key: str, raw: str):
    typ, _ = SCHEMA[key]
    raw = raw.strip()
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"value for {key} must be {typ.__name__}, got {raw!r}") from None


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: default for k, (_, default) in SCHEMA.items()}
        for key, val in self.values.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown configuration key {key!r}")
            merged[key] = val
        self.values = merged

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        self.values[key] = _convert(key, raw)

    def model_config(self, nodes: int) -> ModelConfig:
        return ModelConfig(
            nodes=nodes,
            hour_window=self["model.hour_window"],
            day_window=self["model.day_window"],
            horizon=self["model.horizon"],
            slices_per_day=self["model.slices_per_day"],
            feat_dim=self["model.feat_dim"],
            blocks=self["model.blocks"],
            heads=self["model.heads"],
            adaptive_rank=self["model.adaptive_rank"],
            ff_dim=self["model.ff_dim"],
            mid_dim=self["model.mid_dim"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self["train.lr"],
            batch_size=self["train.batch_size"],
            max_epochs=self["train.max_epochs"],
            patience=self["train.patience"],
            seed=self["train.seed"],
            mape_epsilon=self["eval.mape_epsilon"],
            min_delta=self["train.min_delta"],
            ablation=AblationFlags.from_names(self["train.ablate"]),
        )

    def sigma(self) -> float | None:
        return self["graph.sigma"] if self["graph.sigma"] > 0 else None

    def canonical_lines(self) -> list[str]:
        return [f"{k} = {self.values[k]}" for k in sorted(self.values)]

    def hash(self) -> str:
        digest = hashlib.sha256("\n".join(self.canonical_lines()).encode("utf-8"))
        return digest.hexdigest()[:12]


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{line_no}: expected 'section.key = value'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{line_no}: unknown configuration key {key!r}")
        values[key] = _convert(key, raw)
    return values


def load_run_config(path=None, overrides: list[str] = ()) -> RunConfig:
    """Build a RunConfig from an optional file plus `key=value` overrides."""
    values: dict[str, object] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values = parse_config_text(path.read_text(), origin=str(path))
    cfg = RunConfig(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        cfg.set(key.strip(), raw)
    return cfg
