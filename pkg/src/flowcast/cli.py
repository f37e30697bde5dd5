"""Command-line entry point: ingest, train, eval, predict, gradcheck.

Every command is deterministic given its configuration and seed; wall-clock
only ever appears in log lines and the history timing column. Exit codes:
0 success, 2 input error, 3 training divergence, 4 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, load_run_config
from .data import (
    ChannelBatch,
    inject_noise,
    load_edges_csv,
    load_series_csv,
    make_channels,
    split_train_val_test,
    compute_norm_stats,
    zscore,
)
from .errors import (
    CheckpointError,
    ConfigError,
    FlowcastError,
    IngestionError,
    TrainingDiverged,
    WindowError,
)
from .graph import adaptive_adjacency, build_fixed_adjacency, RoadGraph
from .model import (
    ModelConfig,
    init_model_params,
    load_params_into,
    model_forward,
    save_checkpoint,
)
from .spatial import spatial_forward
from .synthetic import write_edges_csv, write_series_csv
from .temporal import attention_scores, position_encode, qkv_project, temporal_forward
from .training import evaluate, train

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_CHECKPOINT = 4

FLOAT_FORMAT = "%.17g"


def _fmt(x: float) -> str:
    return FLOAT_FORMAT % x


def _load_dataset(cfg: RunConfig):
    series = cfg["data.series"]
    edges = cfg["data.edges"]
    for label, path in (("data.series", series), ("data.edges", edges)):
        if not path:
            raise ConfigError(f"{label} is not set")
        if not Path(path).exists():
            raise IngestionError(f"file not found: {path}")
    table = load_series_csv(series, slices_per_day=cfg["model.slices_per_day"])
    graph = load_edges_csv(edges, node_count=table.node_count)
    return table, graph


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["data.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header: list[str], rows, cfg: RunConfig, extra_comments=()):
    with path.open("w", newline="") as fh:
        fh.write(f"# config={cfg.hash()}\n")
        for comment in extra_comments:
            fh.write(f"# {comment}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(cell if isinstance(cell, str) else _fmt(cell) for cell in row) + "\n")


def cmd_ingest(cfg: RunConfig) -> int:
    table, graph = _load_dataset(cfg)
    out = _out_dir(cfg)
    write_series_csv(table, out / "series.csv")
    write_edges_csv(graph, out / "edges.csv")
    summary = {
        "nodes": table.node_count,
        "time_slices": table.total_slices,
        "edges": len(graph.edges),
        "start_index": table.start_index,
        "config_hash": cfg.hash(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(
        f"ingested: {summary['nodes']} nodes, {summary['time_slices']} slices, "
        f"{summary['edges']} edges -> {out}"
    )
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    table, graph = _load_dataset(cfg)
    mcfg = cfg.model_config(nodes=table.node_count)
    tcfg = cfg.train_config()
    result = train(table, graph, mcfg, tcfg, sigma=cfg.sigma(), kappa=cfg["graph.kappa"])
    out = _out_dir(cfg)

    save_checkpoint(out / "checkpoint.bin", result.params)
    _write_csv(
        out / "history.csv",
        ["epoch", "train_mae", "val_mae", "elapsed_s"],
        [(str(r.epoch), r.train_mae, r.val_mae, r.elapsed_s) for r in result.history],
        cfg,
        extra_comments=[f"variant={tcfg.ablation.name()}"],
    )
    normed = zscore(table, result.stats)
    report = evaluate(
        result.params,
        mcfg,
        result.adjacency,
        normed,
        result.splits[1],
        result.stats,
        mape_epsilon=cfg["eval.mape_epsilon"],
        dataset_tag="validation",
    )
    _write_csv(
        out / "val_report.csv",
        ["step", "mae", "mape", "rmse"],
        report.rows(),
        cfg,
    )
    print(
        f"trained {len(result.history)} epochs; best epoch {result.best_epoch} "
        f"(val MAE {result.best_val_mae:.6g}) -> {out / 'checkpoint.bin'}"
    )
    return EXIT_OK


def _restore_model(cfg: RunConfig, table, graph):
    mcfg = cfg.model_config(nodes=table.node_count)
    tcfg = cfg.train_config()
    checkpoint = cfg["eval.checkpoint"] or str(Path(cfg["data.out_dir"]) / "checkpoint.bin")
    if not Path(checkpoint).exists():
        raise IngestionError(f"checkpoint not found: {checkpoint}")
    params = init_model_params(mcfg, seed=tcfg.seed, ablation=tcfg.ablation)
    load_params_into(checkpoint, params)
    adj = build_fixed_adjacency(graph, sigma=cfg.sigma(), kappa=cfg["graph.kappa"])
    return mcfg, params, adj


def cmd_eval(
    cfg: RunConfig,
    export_adjacency: str | None = None,
    with_noise: bool = False,
) -> int:
    table, graph = _load_dataset(cfg)
    mcfg, params, adj = _restore_model(cfg, table, graph)
    _, val_anchors, test_anchors = split_train_val_test(table, mcfg)
    stats = compute_norm_stats(table, train_boundary_row=val_anchors[0])
    normed = zscore(table, stats)

    report = evaluate(
        params, mcfg, adj, normed, test_anchors, stats,
        mape_epsilon=cfg["eval.mape_epsilon"], dataset_tag="test",
    )
    noise_std = cfg["eval.noise_std"]
    header = ["step", "mae", "mape", "rmse"]
    rows = report.rows()
    if with_noise or noise_std > 0:
        noisy_inputs = inject_noise(normed, std=noise_std, seed=cfg["eval.noise_seed"])
        noisy = evaluate(
            params, mcfg, adj, normed, test_anchors, stats,
            mape_epsilon=cfg["eval.mape_epsilon"], dataset_tag="test+noise",
            input_table=noisy_inputs,
        )
        header += ["mae_noisy", "mape_noisy", "rmse_noisy"]
        rows = [
            clean + noisy_row[1:]
            for clean, noisy_row in zip(report.rows(), noisy.rows())
        ]
    out = _out_dir(cfg)
    _write_csv(out / "report.csv", header, rows, cfg)

    if export_adjacency:
        with ad.no_grad():
            learned = adaptive_adjacency(params.e_c, params.e_r).data
        _write_csv(
            Path(export_adjacency),
            [f"node_{i}" for i in range(learned.shape[1])],
            [list(row) for row in learned],
            cfg,
        )
    avg = report.average
    print(
        f"test MAE {avg.mae:.6g}, MAPE {avg.mape:.6g}%, RMSE {avg.rmse:.6g} "
        f"({len(test_anchors)} anchors) -> {out / 'report.csv'}"
    )
    return EXIT_OK


def cmd_predict(cfg: RunConfig) -> int:
    table, graph = _load_dataset(cfg)
    mcfg, params, adj = _restore_model(cfg, table, graph)
    _, val_anchors, test_anchors = split_train_val_test(table, mcfg)
    stats = compute_norm_stats(table, train_boundary_row=val_anchors[0])
    normed = zscore(table, stats)

    anchor = cfg["eval.anchor"]
    if anchor < 0:
        anchor = test_anchors[-1]
    batch = make_channels(normed, [anchor], mcfg)
    with ad.no_grad():
        pred = model_forward(batch, params, mcfg, adj).data
    pred = pred * stats.std + stats.mean  # (1, nodes, horizon, 1)
    out = _out_dir(cfg)
    rows = [
        (str(node), str(step + 1), float(pred[0, node, step, 0]))
        for node in range(mcfg.nodes)
        for step in range(mcfg.horizon)
    ]
    _write_csv(
        out / "prediction.csv",
        ["node", "step", "value"],
        rows,
        cfg,
        extra_comments=[f"anchor={anchor}"],
    )
    print(f"forecast for anchor {anchor} -> {out / 'prediction.csv'}")
    return EXIT_OK


def _gradcheck_suite(tol_override: float = 0.0):
    """(name, callable -> GradCheckReport) pairs covering every op and the full model."""
    rng = np.random.default_rng(7)

    def t(shape, scale=1.0):
        return ad.Tensor(rng.uniform(-scale, scale, shape), requires_grad=True)

    checks = []

    def check(name, tol):
        def decorator(fn):
            checks.append((name, fn, tol_override or tol))
            return fn
        return decorator

    a, b = t((3, 4)), t((4, 2))
    check("matmul", 1e-6)(lambda: ad.grad_check(lambda: ad.matmul(a, b), {"a": a, "b": b}))
    wide, narrow = t((2, 3)), t((2, 1))
    check("broadcast_add", 1e-6)(
        lambda: ad.grad_check(lambda: ad.add(wide, narrow), {"a": wide, "b": narrow})
    )
    check("mul", 1e-6)(lambda: ad.grad_check(lambda: ad.mul(wide, wide), {"a": wide}))
    x1 = t((4, 5))
    check("relu", 1e-6)(lambda: ad.grad_check(lambda: ad.relu(x1), {"x": x1}))
    check("sigmoid", 1e-6)(lambda: ad.grad_check(lambda: ad.sigmoid(x1), {"x": x1}))
    check("tanh", 1e-6)(lambda: ad.grad_check(lambda: ad.tanh(x1), {"x": x1}))
    check("softmax_lastdim", 1e-5)(
        lambda: ad.grad_check(lambda: ad.softmax_lastdim(x1), {"x": x1})
    )
    xc, kc = t((3, 4, 2)), t((8, 6))
    check("temporal_conv", 1e-5)(
        lambda: ad.grad_check(lambda: ad.temporal_conv(xc, kc, 3, 2), {"x": xc, "k": kc})
    )
    ec, er = t((4, 2)), t((2, 4))
    check("adaptive_adjacency", 1e-5)(
        lambda: ad.grad_check(lambda: adaptive_adjacency(ec, er), {"e_c": ec, "e_r": er})
    )

    mcfg = ModelConfig(
        nodes=3, hour_window=4, day_window=2, horizon=2, slices_per_day=8,
        feat_dim=4, blocks=1, heads=2, adaptive_rank=2,
    )
    params = init_model_params(mcfg, seed=3)
    graph = RoadGraph(node_count=3, edges=[(0, 1, 1.0), (1, 2, 0.5), (2, 0, 1.5)])
    adj = build_fixed_adjacency(graph, kappa=0.0)
    batch = ChannelBatch(
        x_hour=rng.uniform(-1, 1, (3, 4, 1)),
        x_day=rng.uniform(-1, 1, (3, 2, 1)),
        y=rng.uniform(-1, 1, (3, 2, 1)),
        hour_time_index=np.arange(20, 24),
        day_time_index=np.array([4, 12]),
    )

    block = params.channels["hour"].blocks[0]
    codebook = params.channels["hour"].codebook
    xb = t((3, 4, 4), scale=0.5)
    check("spatial_forward", 1e-5)(
        lambda: ad.grad_check(
            lambda: spatial_forward(
                xb, adaptive_adjacency(params.e_c, params.e_r), adj.a_fwd, adj.a_bwd, block.spatial
            ),
            {"x": xb, **block.spatial.named("spatial"), "e_c": params.e_c, "e_r": params.e_r},
        )
    )
    check("position_encode", 1e-5)(
        lambda: ad.grad_check(
            lambda: position_encode(xb, np.arange(4), codebook, mcfg.slices_per_day),
            {"x": xb, **codebook.named("codebook")},
        )
    )
    check("attention", 1e-5)(
        lambda: ad.grad_check(
            lambda: attention_scores(*qkv_project(xb, block.attention)[:2], mcfg.feat_dim),
            {"x": xb, "w_q": block.attention.w_q, "w_k": block.attention.w_k},
        )
    )
    check("temporal_forward", 1e-5)(
        lambda: ad.grad_check(
            lambda: temporal_forward(xb, block.attention, d_scale=mcfg.feat_dim),
            {"x": xb, **block.attention.named("attention")},
        )
    )
    check("full_model", 1e-3)(
        lambda: ad.grad_check(
            lambda: model_forward(batch, params, mcfg, adj), params.named()
        )
    )
    return checks


def cmd_gradcheck(cfg: RunConfig) -> int:
    failures = 0
    for name, fn, tol in _gradcheck_suite(tol_override=cfg["gradcheck.tol"]):
        report = fn()
        report.tol = tol
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} {name}: max relative error {report.max_error:.3e} (tol {tol:g})")
        if not report.passed:
            failures += 1
            for pname, err in report.failures():
                print(f"     worst offender {pname}: {err:.3e}")
    if failures:
        print(f"{failures} gradient check(s) failed")
        return 1
    print("all gradient checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowcast",
        description="Train and evaluate the multi-channel spatial-temporal forecaster.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("ingest", "validate a series/edges CSV pair and write a dataset bundle"),
        ("train", "train a model and write checkpoint + history"),
        ("eval", "evaluate a checkpoint on the test split"),
        ("predict", "forecast from a checkpoint at one anchor"),
        ("gradcheck", "run the finite-difference gradient suite"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="path to a section.key = value config file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
        if name == "eval":
            p.add_argument("--noise-std", type=float, help="also report noisy-input metrics")
            p.add_argument("--export-adjacency", metavar="PATH", help="write the learned adjacency as CSV")
        if name == "train":
            p.add_argument("--ablate", help="shorthand for --set train.ablate=NAME")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.set)
        if args.seed is not None:
            cfg.set("train.seed", str(args.seed))
        if getattr(args, "ablate", None):
            cfg.set("train.ablate", args.ablate)
        if getattr(args, "noise_std", None) is not None:
            cfg.set("eval.noise_std", str(args.noise_std))
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(
                cfg,
                export_adjacency=getattr(args, "export_adjacency", None),
                with_noise=getattr(args, "noise_std", None) is not None,
            )
        if args.command == "predict":
            return cmd_predict(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        log.error("checkpoint mismatch: %s", exc)
        return EXIT_CHECKPOINT
    except (ConfigError, IngestionError, WindowError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except FlowcastError as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
