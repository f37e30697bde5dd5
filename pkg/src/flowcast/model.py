"""Assembly of the full forecasting network and its checkpoint format.

Per channel: feature expansion, K spatial-temporal blocks chained residually
(next input = previous input + previous output), an output convolution over
input+output of the last block, and an alignment convolution onto the
hour-channel length. The two channels fuse through a sigmoid gate and a
two-stage convolution head emits the multi-step forecast.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ConfigError, ShapeError
from .graph import AdjacencyPair, adaptive_adjacency, init_adaptive_embeddings
from .spatial import SpatialParams, spatial_forward
from .temporal import (
    DAYS_PER_WEEK,
    AttentionParams,
    PositionCodebook,
    position_encode,
    temporal_forward,
)

CHECKPOINT_MAGIC = b"MCSTTM1"

HOUR = "hour"
DAY = "day"


@dataclass(frozen=True)
class AblationFlags:
    """Switches that drop individual architecture pieces for ablation runs."""

    no_adaptive: bool = False
    no_fixed_graph: bool = False
    no_s_block: bool = False
    no_t_block: bool = False
    no_multi_channel: bool = False

    KNOWN = (
        "no_adaptive",
        "no_fixed_graph",
        "no_s_block",
        "no_t_block",
        "no_multi_channel",
    )

    def __post_init__(self):
        if self.no_s_block and self.no_t_block:
            raise ConfigError("no_s_block and no_t_block together leave no block at all")

    @classmethod
    def from_names(cls, names: list[str] | str) -> "AblationFlags":
        if isinstance(names, str):
            names = [n.strip() for n in names.split(",") if n.strip()]
        unknown = [n for n in names if n not in cls.KNOWN]
        if unknown:
            raise ConfigError(f"unknown ablation flag(s) {unknown}; known: {list(cls.KNOWN)}")
        return cls(**{n: True for n in names})

    def active(self) -> list[str]:
        return [n for n in self.KNOWN if getattr(self, n)]

    def name(self) -> str:
        return "+".join(self.active()) or "full"


FULL_MODEL = AblationFlags()


@dataclass(frozen=True)
class ModelConfig:
    """Shape hyperparameters of the network."""

    nodes: int
    hour_window: int = 12          # recent consecutive slices per sample
    day_window: int = 7            # prior days sampled at the same slice
    horizon: int = 12              # forecast steps
    slices_per_day: int = 288
    feat_dim: int = 64
    blocks: int = 2
    heads: int = 4
    adaptive_rank: int = 10
    ff_dim: int = 0                # 0 -> 4 * feat_dim
    mid_dim: int = 0               # 0 -> feat_dim // 2

    def __post_init__(self):
        for name in (
            "nodes",
            "hour_window",
            "day_window",
            "horizon",
            "slices_per_day",
            "feat_dim",
            "blocks",
            "heads",
            "adaptive_rank",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.feat_dim % self.heads != 0:
            raise ConfigError(
                f"heads ({self.heads}) must divide feat_dim ({self.feat_dim})"
            )

    @property
    def ff_width(self) -> int:
        return self.ff_dim if self.ff_dim > 0 else 4 * self.feat_dim

    @property
    def mid_width(self) -> int:
        return self.mid_dim if self.mid_dim > 0 else max(1, self.feat_dim // 2)


@dataclass
class BlockParams:
    spatial: SpatialParams
    attention: AttentionParams


@dataclass
class ChannelParams:
    expand: ad.Tensor                       # (1, feat)
    blocks: list[BlockParams]
    codebook: PositionCodebook
    out_conv: ad.Tensor                     # (T*feat, T*feat)
    align: ad.Tensor                        # (T*feat, hour_window*feat)
    window: int                             # time length this channel consumes


@dataclass
class ModelParams:
    """All learnable tensors, addressable by stable dotted names."""

    channels: dict[str, ChannelParams]
    e_c: ad.Tensor
    e_r: ad.Tensor
    gate_hour: ad.Tensor                    # (feat, 1)
    gate_day: ad.Tensor                     # (feat, 1)
    head_a: ad.Tensor                       # (hour_window*feat, horizon*mid)
    head_b: ad.Tensor                       # (horizon*mid, horizon*1)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def named(self) -> dict[str, ad.Tensor]:
        out: dict[str, ad.Tensor] = {}
        for ch_name, ch in self.channels.items():
            out[f"{ch_name}.expand"] = ch.expand
            for i, block in enumerate(ch.blocks):
                out.update(block.spatial.named(f"{ch_name}.block{i}.spatial"))
                out.update(block.attention.named(f"{ch_name}.block{i}.attention"))
            out.update(ch.codebook.named(f"{ch_name}.codebook"))
            out[f"{ch_name}.out_conv"] = ch.out_conv
            out[f"{ch_name}.align"] = ch.align
        out["adaptive.e_c"] = self.e_c
        out["adaptive.e_r"] = self.e_r
        out["fusion.gate_hour"] = self.gate_hour
        out["fusion.gate_day"] = self.gate_day
        out["head.conv_a"] = self.head_a
        out["head.conv_b"] = self.head_b
        return out

    def tensors(self) -> Iterator[ad.Tensor]:
        return iter(self.named().values())

    def zero_grads(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named()
        missing = sorted(set(named) - set(arrays))
        extra = sorted(set(arrays) - set(named))
        if missing or extra:
            raise CheckpointError(
                f"parameter names differ from model: missing={missing}, unexpected={extra}"
            )
        for name, tensor in named.items():
            if arrays[name].shape != tensor.shape:
                raise CheckpointError(
                    f"shape of {name} is {arrays[name].shape}, model expects {tensor.shape}"
                )
            tensor.data = arrays[name].astype(np.float64)

    def copy_state(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.state_arrays().items()}

    def set_all_zero(self) -> None:
        for t in self.tensors():
            t.data = np.zeros_like(t.data)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> ad.Tensor:
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return ad.Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _init_channel(
    cfg: ModelConfig, window: int, rng: np.random.Generator
) -> ChannelParams:
    f = cfg.feat_dim
    blocks = []
    for _ in range(cfg.blocks):
        spatial = SpatialParams(
            w_adaptive=_uniform(rng, (f, f), f),
            w_forward=_uniform(rng, (f, f), f),
            w_backward=_uniform(rng, (f, f), f),
        )
        attention = AttentionParams(
            w_q=_uniform(rng, (f, f), f),
            w_k=_uniform(rng, (f, f), f),
            w_v=_uniform(rng, (f, f), f),
            ff_w0=_uniform(rng, (f, cfg.ff_width), f),
            ff_w1=_uniform(rng, (cfg.ff_width, cfg.ff_width), cfg.ff_width),
            ff_w2=_uniform(rng, (cfg.ff_width, f), cfg.ff_width),
            heads=cfg.heads,
        )
        blocks.append(BlockParams(spatial=spatial, attention=attention))
    codebook = PositionCodebook(
        tod_table=_uniform(rng, (cfg.slices_per_day, f), f),
        dow_table=_uniform(rng, (DAYS_PER_WEEK, f), f),
    )
    return ChannelParams(
        expand=_uniform(rng, (1, f), 1),
        blocks=blocks,
        codebook=codebook,
        out_conv=_uniform(rng, (window * f, window * f), window * f),
        align=_uniform(rng, (window * f, cfg.hour_window * f), window * f),
        window=window,
    )


def init_model_params(
    cfg: ModelConfig, seed: int = 0, ablation: AblationFlags = FULL_MODEL
) -> ModelParams:
    """Build all parameters with a deterministic seed.

    With the multi-channel mechanism ablated the day pipeline consumes the
    hour window, so its time length (and kernels) follow hour_window.
    """
    rng = np.random.default_rng(seed)
    day_window = cfg.hour_window if ablation.no_multi_channel else cfg.day_window
    channels = {
        HOUR: _init_channel(cfg, cfg.hour_window, rng),
        DAY: _init_channel(cfg, day_window, rng),
    }
    e_c, e_r = init_adaptive_embeddings(cfg.nodes, cfg.adaptive_rank, rng)
    f = cfg.feat_dim
    return ModelParams(
        channels=channels,
        e_c=e_c,
        e_r=e_r,
        gate_hour=_uniform(rng, (f, 1), f),
        gate_day=_uniform(rng, (f, 1), f),
        head_a=_uniform(rng, (cfg.hour_window * f, cfg.horizon * cfg.mid_width), cfg.hour_window * f),
        head_b=_uniform(rng, (cfg.horizon * cfg.mid_width, cfg.horizon), cfg.horizon * cfg.mid_width),
        ablation=ablation,
    )


def st_block_forward(
    x: ad.Tensor,
    block: BlockParams,
    codebook: PositionCodebook,
    time_index: np.ndarray,
    a_adp: ad.Tensor | None,
    adj: AdjacencyPair,
    cfg: ModelConfig,
    ablation: AblationFlags = FULL_MODEL,
) -> ad.Tensor:
    """One spatial-temporal block: graph mixing, positional encoding, attention."""
    if not ablation.no_s_block:
        x = spatial_forward(
            x,
            a_adp,
            adj.a_fwd,
            adj.a_bwd,
            block.spatial,
            use_adaptive=not ablation.no_adaptive,
            use_fixed=not ablation.no_fixed_graph,
        )
    x = position_encode(x, time_index, codebook, cfg.slices_per_day)
    if not ablation.no_t_block:
        x = temporal_forward(x, block.attention, d_scale=cfg.feat_dim)
    return x


def channel_pipeline(
    x: ad.Tensor,
    time_index: np.ndarray,
    channel: ChannelParams,
    a_adp: ad.Tensor | None,
    adj: AdjacencyPair,
    cfg: ModelConfig,
    ablation: AblationFlags = FULL_MODEL,
) -> ad.Tensor:
    """Expand, run the residual block chain, and align onto the hour length."""
    steps = x.shape[-2]
    if steps != channel.window:
        raise ShapeError(
            f"channel expects {channel.window} time steps, got {steps}"
        )
    current = ad.matmul(x, channel.expand)  # (..., nodes, T, feat)
    for block in channel.blocks:
        out = st_block_forward(
            current, block, channel.codebook, time_index, a_adp, adj, cfg, ablation
        )
        current = ad.add(current, out)  # joint input+output feeds the next block
    mixed = ad.temporal_conv(current, channel.out_conv, channel.window, cfg.feat_dim)
    return ad.temporal_conv(mixed, channel.align, cfg.hour_window, cfg.feat_dim)


@dataclass
class GateOutput:
    gate: ad.Tensor
    fused: ad.Tensor


def gated_fusion(
    x_hour: ad.Tensor, x_day: ad.Tensor, f_hour: ad.Tensor, f_day: ad.Tensor
) -> GateOutput:
    """Convex combination of the channels with a per-(node, step) sigmoid gate."""
    if x_hour.shape != x_day.shape:
        raise ShapeError(f"channel shapes differ: {x_hour.shape} vs {x_day.shape}")
    gate = ad.sigmoid(ad.add(ad.matmul(x_hour, f_hour), ad.matmul(x_day, f_day)))
    fused = ad.add(ad.mul(gate, x_hour), ad.mul(ad.sub(1.0, gate), x_day))
    return GateOutput(gate=gate, fused=fused)


def prediction_head(
    fused: ad.Tensor, conv_a: ad.Tensor, conv_b: ad.Tensor, cfg: ModelConfig
) -> ad.Tensor:
    """Two chained per-node convolutions reducing features to a single value."""
    mid = ad.temporal_conv(fused, conv_a, cfg.horizon, cfg.mid_width)
    return ad.temporal_conv(mid, conv_b, cfg.horizon, 1)


def model_forward(
    batch, params: ModelParams, cfg: ModelConfig, adj: AdjacencyPair
) -> ad.Tensor:
    """Forecast (..., nodes, horizon, 1) from a channel batch.

    Accepts a single sample (nodes, T, 1 inputs) or a stacked batch with one
    leading axis. With the multi-channel mechanism ablated the hour window
    feeds both fusion inputs.
    """
    ab = params.ablation
    a_adp = None
    if not ab.no_adaptive and not ab.no_s_block:
        a_adp = adaptive_adjacency(params.e_c, params.e_r)

    x_hour = ad.as_tensor(batch.x_hour)
    hour_idx = np.asarray(batch.hour_time_index)
    if ab.no_multi_channel:
        x_day, day_idx = x_hour, hour_idx
    else:
        x_day, day_idx = ad.as_tensor(batch.x_day), np.asarray(batch.day_time_index)

    hour_feat = channel_pipeline(
        x_hour, hour_idx, params.channels[HOUR], a_adp, adj, cfg, ab
    )
    day_feat = channel_pipeline(
        x_day, day_idx, params.channels[DAY], a_adp, adj, cfg, ab
    )
    fused = gated_fusion(hour_feat, day_feat, params.gate_hour, params.gate_day).fused
    return prediction_head(fused, params.head_a, params.head_b, cfg)


def save_checkpoint(path, params: ModelParams) -> None:
    """Versioned binary: magic, length-prefixed UTF-8 manifest, float64 LE arrays."""
    entries = []
    offset = 0
    arrays = params.state_arrays()
    for name, arr in arrays.items():
        entries.append([name, list(arr.shape), offset])
        offset += arr.size * 8
    manifest = json.dumps({"params": entries, "variant": params.ablation.name()}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    """Read back (arrays by name, variant name); bit-exact round trip."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a model checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError(f"{path} is truncated before the manifest length")
    (manifest_len,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    try:
        manifest = json.loads(blob[pos : pos + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt manifest") from exc
    pos += manifest_len
    data = blob[pos:]
    arrays: dict[str, np.ndarray] = {}
    for name, shape, offset in manifest["params"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(data):
            raise CheckpointError(f"{path}: array {name} extends past end of file")
        arrays[name] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).copy()
    return arrays, manifest.get("variant", "full")


def load_params_into(path, params: ModelParams) -> ModelParams:
    arrays, variant = load_checkpoint(path)
    if variant != params.ablation.name():
        raise CheckpointError(
            f"checkpoint variant {variant!r} does not match model variant {params.ablation.name()!r}"
        )
    params.load_arrays(arrays)
    return params
