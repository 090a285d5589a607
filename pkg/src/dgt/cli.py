"""Command-line entry point: ``dgt <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence, 5 evaluation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline as pl
from .cluster import cluster_scan, kmeans, pca_scatter, stock_features, best_k
from .corr import METRICS, SCOPES, build_graph_set, correlation_matrix, load_graph_set, save_graph_set, top_correlated
from .evaluate import backtest
from .ingest import denormalize, load_panel, load_price_csv, prepare_dataset, save_panel
from .train import TrainConfig, grid_search, load_checkpoint, save_checkpoint

log = logging.getLogger("dgt")


def _ratios(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("ratios need three comma-separated numbers")
    return tuple(parts)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p)


def _k_range(text: str) -> range:
    lo, sep, hi = text.partition("..")
    if not sep:
        raise argparse.ArgumentTypeError("k range looks like 2..10")
    return range(int(lo), int(hi) + 1)


def _seed(value: int) -> int:
    env = os.environ.get("DGT_SEED")
    return int(env) if env is not None else value


def _dataset_from_panel(path, window_len=None):
    pf = load_panel(path)
    if pf.stats is None:
        raise pl.ConfigError(f"{path} holds an unnormalized panel; write it with `dgt ingest`")
    raw = denormalize(pf.panel, pf.stats)
    return prepare_dataset(raw, pf.block_len, pf.ratios, window_len)


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# ----------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    raw = load_price_csv(args.input)
    data = prepare_dataset(raw, args.block_len, args.ratios)
    save_panel(data.panel, args.out, data.stats, args.block_len, args.ratios)
    split = data.split
    print(f"{raw.n_stocks} tickers x {raw.n_days} days, {len(data.partition)} blocks "
          f"({len(split.train_blocks)}/{len(split.val_blocks)}/{len(split.test_blocks)})"
          + (f"; dropped {len(raw.dropped)} incomplete tickers" if raw.dropped else ""))
    return 0


def cmd_corr(args) -> int:
    data = _dataset_from_panel(args.panel, args.window_len)
    graphs = build_graph_set(data.panel, args.metric, args.scope, args.heads, data.spans["train"],
                             data.all_window_spans(), args.bins)
    save_graph_set(graphs, args.out)
    print(f"{args.metric}/{args.scope}: {1 if graphs.global_matrix is not None else 0} global and "
          f"{len(graphs.local)} local matrices -> {args.out}")
    return 0


def cmd_corr_top(args) -> int:
    data = _dataset_from_panel(args.panel)
    s, e = data.spans["train"]
    m = correlation_matrix(args.metric, data.panel.prices[:, s:e], data.panel.tickers, (s, e), "global", args.bins)
    _write(args.out, pl.topk_csv(top_correlated(m, args.ticker, args.k)))
    return 0


def cmd_train(args) -> int:
    data = _dataset_from_panel(args.panel, args.window_len)
    metric = args.metric if args.spatial else "none"
    scope = args.scope if args.spatial else "none"
    try:
        cfg = TrainConfig(arch=args.arch, use_spatial=args.spatial, metric=metric, scope=scope,
                          lr_grid=args.lr_grid, epochs=args.epochs, eval_every=min(args.eval_every, args.epochs),
                          seed=_seed(args.seed), d=args.d, heads=args.heads, window_len=data.window_len,
                          layers=args.layers)
    except ValueError as exc:
        raise pl.ConfigError(str(exc)) from None
    graphs = None
    if metric != "none":
        if not args.graphs:
            raise pl.ConfigError("--graphs is required with --metric")
        graphs = load_graph_set(args.graphs)
    lr, ckpt, report = grid_search(cfg, data, graphs)
    save_checkpoint(ckpt, args.out)
    if args.log:
        _write(args.log, pl.history_csv(ckpt.history))
    for r in report:
        status = f"val_rmse={r.val_rmse:.6g} best_epoch={r.best_epoch}" if r.status == "ok" else \
            f"diverged at epoch {r.failed_epoch}"
        print(f"lr={r.lr:g}: {status}")
    print(f"selected lr={lr:g} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    data = _dataset_from_panel(args.panel, ckpt.train_config.window_len)
    graphs = load_graph_set(args.graphs) if args.graphs else None
    report = backtest(ckpt, data.panel, data.test, graphs, currency_units=args.currency)
    out = Path(args.out)
    out.write_text(report.to_json(), encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    print(f"RMSE {report.rmse:.6f}  MAE {report.mae:.6f}  ({report.n_cells} cells, {report.units})")
    return 0


def _features(path):
    data = _dataset_from_panel(path)
    return stock_features(data.raw, data.spans["train"])


def cmd_cluster(args) -> int:
    feats = _features(args.panel)
    seed = _seed(args.seed)
    a = kmeans(feats, args.k, seed)
    _write(args.out, pl.clusters_csv(feats.tickers, a.labels))
    if args.scatter:
        _write(args.scatter, pl.scatter_csv(feats.tickers, pca_scatter(feats), a.labels))
    return 0


def cmd_cluster_scan(args) -> int:
    feats = _features(args.panel)
    scan = cluster_scan(feats, args.k_range, _seed(args.seed))
    _write(args.out, pl.scan_csv(scan))
    print(f"silhouette argmax: k={best_k(scan)}", file=sys.stderr)
    return 0


def cmd_pipeline(args) -> int:
    config = pl.load_run_config(args.config)
    result = pl.run_pipeline(config)
    for stage, info in sorted(result.failures.items()):
        print(f"FAILED {stage}: {info['error']}", file=sys.stderr)
    for row in result.leaderboard:
        print(f"{row['architecture']:4s} spatial={row['use_spatial']!s:5s} {row['correlation']:8s} "
              f"{row['scope']:6s} RMSE {row['rmse']:.6f} MAE {row['mae']:.6f}")
    return result.exit_code


def cmd_config_validate(args) -> int:
    config = pl.load_run_config(args.config)
    print(json.dumps(config.to_dict(), indent=1, sort_keys=True))
    return 0


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgt", description="Differential graph transformer stock forecasting")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="clean a price CSV, normalize, and write a panel file")
    s.add_argument("--input", required=True)
    s.add_argument("--block-len", type=int, default=64)
    s.add_argument("--ratios", type=_ratios, default=(0.8, 0.1, 0.1))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("corr", help="build correlation graphs, or query top correlates")
    corr_sub = s.add_subparsers(dest="corr_command")
    s.add_argument("--panel")
    s.add_argument("--metric", choices=METRICS, default="kendall")
    s.add_argument("--scope", choices=SCOPES, default="global")
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--bins", type=int, default=16)
    s.add_argument("--window-len", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_corr)
    t = corr_sub.add_parser("top", help="top-k correlates of a ticker over the training span")
    t.add_argument("--panel", required=True)
    t.add_argument("--ticker", required=True)
    t.add_argument("--k", type=int, default=3)
    t.add_argument("--metric", choices=METRICS, default="pearson")
    t.add_argument("--scope", choices=("global",), default="global")
    t.add_argument("--bins", type=int, default=16)
    t.add_argument("--out", default="-")
    t.set_defaults(func=cmd_corr_top)

    s = sub.add_parser("train", help="grid-search the learning rate and write the best checkpoint")
    s.add_argument("--panel", required=True)
    s.add_argument("--graphs")
    s.add_argument("--arch", choices=("dgt", "gru"), default="dgt")
    s.add_argument("--spatial", action=argparse.BooleanOptionalAction, default=False)
    s.add_argument("--metric", choices=METRICS + ("none",), default="none")
    s.add_argument("--scope", choices=SCOPES + ("none",), default="none")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--eval-every", type=int, default=10)
    s.add_argument("--lr-grid", type=_floats, default=(0.01, 0.1))
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--d", type=int, default=32)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--layers", type=int, default=1)
    s.add_argument("--window-len", type=int)
    s.add_argument("--log", help="per-epoch CSV log")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="backtest a checkpoint on the test split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--panel", required=True)
    s.add_argument("--graphs")
    s.add_argument("--currency", action="store_true", help="report errors in price units")
    s.add_argument("--csv", help="also write the per-cell CSV")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cluster", help="k-means on return/volatility/beta features")
    cl_sub = s.add_subparsers(dest="cluster_command")
    s.add_argument("--panel")
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--scatter", help="PCA scatter CSV")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_cluster)
    t = cl_sub.add_parser("scan", help="silhouette and inertia over a range of k")
    t.add_argument("--panel", required=True)
    t.add_argument("--k-range", type=_k_range, default=range(2, 11))
    t.add_argument("--seed", type=int, default=7)
    t.add_argument("--out", default="-")
    t.set_defaults(func=cmd_cluster_scan)

    s = sub.add_parser("pipeline", help="run every stage from a YAML config")
    s.add_argument("config")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("config", help="configuration utilities")
    cfg_sub = s.add_subparsers(dest="config_command", required=True)
    t = cfg_sub.add_parser("validate", help="check a config file and print it normalized")
    t.add_argument("config")
    t.set_defaults(func=cmd_config_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.func is cmd_corr and (args.panel is None or args.out is None):
        parser.error("corr needs --panel and --out")
    if args.func is cmd_cluster and args.panel is None:
        parser.error("cluster needs --panel")
    try:
        return args.func(args)
    except Exception as exc:
        code = pl.exit_code_for(exc)
        if code == 1:
            if not isinstance(exc, (ValueError, KeyError)):
                raise
            # remaining value errors come from argument values (unknown ticker, bad k, ...)
            code = pl.EXIT_CONFIG
        if args.verbose:
            logging.getLogger("dgt").exception("command failed")
        print(f"dgt: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
