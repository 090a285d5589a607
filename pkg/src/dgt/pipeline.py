"""Run configuration, the staged experiment pipeline, and report emission.

A run is described by a YAML document (schema in the README).  Every stage
records itself in ``manifest.json`` inside the work directory, so an
interrupted or partially failed run can be resumed: finished stages are
skipped, failed ones are retried.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .cluster import ClusterError, cluster_scan, kmeans, pca_scatter, stock_features, best_k
from .corr import (METRICS, SCOPES, CorrelationError, build_graph_set, correlation_matrix, load_graph_set,
                   save_graph_set, top_correlated)
from .evaluate import EvalReport, EvaluationError, backtest, compare_clusters
from .ingest import DataError, PricePanel, denormalize, load_panel, load_price_csv, prepare_dataset, save_panel
from .train import CheckpointError, TrainConfig, TrainingDiverged, grid_search, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_EVAL = 5

ARCHES = ("dgt", "gru")
LEADERBOARD_COLUMNS = ("architecture", "use_spatial", "correlation", "scope", "rmse", "mae")
COMPARISON_COLUMNS = ("correlation", "scope", "rmse_cluster0", "rmse_cluster1", "mae_cluster0",
                      "mae_cluster1", "p_value_rmse", "p_value_mae")
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    pass


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, TrainingDiverged):
        return EXIT_DIVERGED
    if isinstance(exc, (EvaluationError, ClusterError)):
        return EXIT_EVAL
    if isinstance(exc, (DataError, CorrelationError, CheckpointError, OSError)):
        return EXIT_DATA
    return 1


# ----------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class GridRow:
    arch: str
    use_spatial: bool
    metric: str = "none"
    scope: str = "none"

    def __post_init__(self):
        if self.arch not in ARCHES:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.metric not in METRICS + ("none",):
            raise ConfigError(f"unknown correlation {self.metric!r}")
        if self.scope not in SCOPES + ("none",):
            raise ConfigError(f"unknown scope {self.scope!r}")
        if self.arch == "gru" and self.use_spatial:
            raise ConfigError("the GRU baseline cannot use spatial information")
        if not self.use_spatial and self.metric != "none":
            raise ConfigError(f"correlation {self.metric!r} requires use_spatial")
        if self.scope != "none" and self.metric == "none":
            raise ConfigError(f"scope {self.scope!r} requires a correlation metric")
        if self.metric != "none" and self.scope == "none":
            raise ConfigError(f"correlation {self.metric!r} needs a scope")

    @property
    def label(self) -> str:
        spatial = "spatial" if self.use_spatial else "plain"
        return f"{self.arch}-{spatial}-{self.metric}-{self.scope}"

    def train_config(self, base: TrainConfig) -> TrainConfig:
        return replace(base, arch=self.arch, use_spatial=self.use_spatial, metric=self.metric, scope=self.scope)


TRAIN_KEYS = ("lr_grid", "epochs", "eval_every", "seed", "d", "heads", "window_len", "layers",
              "beta1", "beta2", "adam_eps")


@dataclass(frozen=True)
class RunConfig:
    input_csv: Path
    workdir: Path
    grid: tuple[GridRow, ...]
    train: TrainConfig = field(default_factory=TrainConfig)
    block_len: int = 64
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    cluster_k: int = 2
    cluster_seed: int = 7
    k_range: tuple[int, int] = (2, 10)
    compare_test: str = "welch"
    focus_tickers: tuple[str, ...] = ()
    top_k: int = 3
    bins: int = 16

    def to_dict(self) -> dict:
        return {
            "paths": {"input": str(self.input_csv), "workdir": str(self.workdir)},
            "ingest": {"block_len": self.block_len, "ratios": list(self.ratios)},
            "grid": [{"architecture": r.arch, "use_spatial": r.use_spatial, "correlation": r.metric,
                      "scope": r.scope} for r in self.grid],
            "train": {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in self.train.to_dict().items() if k in TRAIN_KEYS},
            "cluster": {"k": self.cluster_k, "seed": self.cluster_seed, "k_range": list(self.k_range),
                        "test": self.compare_test},
            "correlates": {"tickers": list(self.focus_tickers), "k": self.top_k, "bins": self.bins},
        }

    def digest(self) -> str:
        doc = self.to_dict()
        doc.pop("paths")  # moving a work directory should not invalidate it
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _section(doc: dict, name: str, allowed: Iterable[str]) -> dict:
    sec = doc.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    unknown = sorted(set(sec) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    return sec


def _parse_bool(value, where: str) -> bool:
    if isinstance(value, bool):
        return value
    raise ConfigError(f"{where} must be true or false, got {value!r}")


def parse_run_config(doc: dict, base_dir: Path = Path("."), env: dict | None = None,
                     check_paths: bool = True) -> RunConfig:
    """Validate a parsed config document; ``DGT_SEED`` in ``env`` overrides every seed."""
    env = os.environ if env is None else env
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping at the top level")
    unknown = sorted(set(doc) - {"paths", "ingest", "grid", "train", "cluster", "correlates"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    paths = _section(doc, "paths", ("input", "workdir"))
    if "input" not in paths or "workdir" not in paths:
        raise ConfigError("paths.input and paths.workdir are required")
    input_csv = (base_dir / str(paths["input"])).resolve()
    workdir = (base_dir / str(paths["workdir"])).resolve()
    if check_paths and not input_csv.is_file():
        raise ConfigError(f"input CSV not found: {input_csv}")

    ingest = _section(doc, "ingest", ("block_len", "ratios"))
    ratios = tuple(float(r) for r in ingest.get("ratios", (0.8, 0.1, 0.1)))
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    block_len = int(ingest.get("block_len", 64))
    if block_len < 2:
        raise ConfigError("block_len must be >= 2")

    raw_grid = doc.get("grid")
    if not isinstance(raw_grid, list) or not raw_grid:
        raise ConfigError("grid must be a non-empty list of rows")
    grid = []
    for i, row in enumerate(raw_grid):
        if not isinstance(row, dict):
            raise ConfigError(f"grid row {i} must be a mapping")
        extra = sorted(set(row) - {"architecture", "use_spatial", "correlation", "scope"})
        if extra:
            raise ConfigError(f"grid row {i}: unknown key(s) {', '.join(extra)}")
        try:
            grid.append(GridRow(str(row.get("architecture", "dgt")).lower(),
                                _parse_bool(row.get("use_spatial", False), f"grid row {i} use_spatial"),
                                str(row.get("correlation", "none")).lower(),
                                str(row.get("scope", "none")).lower()))
        except ConfigError as exc:
            raise ConfigError(f"grid row {i}: {exc}") from None
    if len({r.label for r in grid}) != len(grid):
        raise ConfigError("grid contains duplicate rows")

    train_doc = _section(doc, "train", TRAIN_KEYS)
    cluster = _section(doc, "cluster", ("k", "seed", "k_range", "test"))
    correlates = _section(doc, "correlates", ("tickers", "k", "bins"))
    seed_override = env.get("DGT_SEED")
    if seed_override is not None:
        try:
            seed_override = int(seed_override)
        except ValueError:
            raise ConfigError(f"DGT_SEED must be an integer, got {seed_override!r}") from None
        train_doc = {**train_doc, "seed": seed_override}
    try:
        train = TrainConfig(**{k: tuple(v) if k == "lr_grid" else v for k, v in train_doc.items()})
        for row in grid:
            row.train_config(train)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None
    if train.window_len > block_len:
        raise ConfigError(f"window_len {train.window_len} exceeds block_len {block_len}")
    if any(r.scope == "dual" for r in grid) and train.heads < 2:
        raise ConfigError("dual scope needs at least 2 heads")

    k_range = tuple(int(k) for k in cluster.get("k_range", (2, 10)))
    if len(k_range) != 2 or not 2 <= k_range[0] <= k_range[1]:
        raise ConfigError(f"cluster.k_range must be [lo, hi] with 2 <= lo <= hi, got {k_range}")
    test = str(cluster.get("test", "welch"))
    if test not in ("welch", "mannwhitney"):
        raise ConfigError(f"cluster.test must be 'welch' or 'mannwhitney', got {test!r}")
    cluster_seed = int(cluster.get("seed", 7)) if seed_override is None else seed_override
    tickers = correlates.get("tickers", [])
    if isinstance(tickers, str):
        tickers = [tickers]
    return RunConfig(input_csv, workdir, tuple(grid), train, block_len, ratios,
                     int(cluster.get("k", 2)), cluster_seed, k_range, test,
                     tuple(str(t) for t in tickers), int(correlates.get("k", 3)),
                     int(correlates.get("bins", 16)))


def load_run_config(path, env: dict | None = None, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_run_config(doc, path.parent, env, check_paths)


# ----------------------------------------------------------------------------
# report emission


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "True" if value else "False"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_text(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def leaderboard_rows(results: Iterable[dict]) -> list[dict]:
    """Leaderboard rows sorted by RMSE descending, so the best model is last."""
    rows = [{c: r[c] for c in LEADERBOARD_COLUMNS} for r in results]
    rows.sort(key=lambda r: (-r["rmse"], -r["mae"], r["architecture"], r["use_spatial"],
                             r["correlation"], r["scope"]))
    return rows


def emit_report(results: Iterable[dict], path, fmt: str | None = None,
                columns: Sequence[str] = LEADERBOARD_COLUMNS, sort: bool = True) -> Path:
    """Write result rows as CSV or JSON; the format defaults to the file suffix."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    rows = leaderboard_rows(results) if sort else [{c: r[c] for c in columns} for r in results]
    if fmt == "csv":
        text = _csv_text(columns, rows)
    elif fmt == "json":
        text = json.dumps({"columns": list(columns), "rows": rows}, indent=1, sort_keys=True) + "\n"
    else:
        raise ValueError(f"unknown report format {fmt!r}; use csv or json")
    path.write_text(text, encoding="utf-8")
    return path


def comparison_rows(comparisons: Iterable[tuple[GridRow, object]]) -> list[dict]:
    rows = []
    for row, cmp in comparisons:
        rows.append({"correlation": row.metric, "scope": row.scope,
                     "rmse_cluster0": cmp.rmse[0], "rmse_cluster1": cmp.rmse[1],
                     "mae_cluster0": cmp.mae[0], "mae_cluster1": cmp.mae[1],
                     "p_value_rmse": cmp.p_rmse, "p_value_mae": cmp.p_mae})
    rows.sort(key=lambda r: (-r["rmse_cluster0"], r["correlation"], r["scope"]))
    return rows


def history_csv(history: Sequence[dict]) -> str:
    cols = ("epoch", "train_loss", "val_rmse", "val_mae")
    return _csv_text(cols, [{c: ("" if h[c] is None else h[c]) for c in cols} for h in history])


def topk_csv(pairs: Sequence[tuple[str, float]]) -> str:
    return _csv_text(("rank", "ticker", "value"),
                     [{"rank": i + 1, "ticker": t, "value": v} for i, (t, v) in enumerate(pairs)])


def clusters_csv(tickers, labels) -> str:
    return _csv_text(("ticker", "cluster"), [{"ticker": t, "cluster": int(c)} for t, c in zip(tickers, labels)])


def scan_csv(scan) -> str:
    return _csv_text(("k", "silhouette", "inertia"),
                     [{"k": k, "silhouette": s, "inertia": i} for k, s, i in scan])


def scatter_csv(tickers, coords, labels) -> str:
    return _csv_text(("ticker", "pc1", "pc2", "cluster"),
                     [{"ticker": t, "pc1": float(c[0]), "pc2": float(c[1]) if len(c) > 1 else 0.0,
                       "cluster": int(l)} for t, c, l in zip(tickers, coords, labels)])


def trace_csv(panel: PricePanel, tickers: Sequence[str]) -> str:
    """Aligned price traces of several tickers, one row per date."""
    idx = [panel.index_of(t) for t in tickers]
    return _csv_text(("date",) + tuple(tickers),
                     [{"date": d, **{t: float(panel.prices[i, j]) for t, i in zip(tickers, idx)}}
                      for j, d in enumerate(panel.dates)])


# ----------------------------------------------------------------------------
# manifest


class Manifest:
    """Stage bookkeeping persisted as JSON; updates are serialized by a lock."""

    def __init__(self, path: Path, digest: str):
        self.path = path
        self.digest = digest
        self.stages: dict[str, dict] = {}
        self._lock = threading.Lock()
        if path.exists():
            doc = json.loads(path.read_text(encoding="utf-8"))
            if doc.get("config_digest") != digest:
                raise ConfigError(f"{path.parent} holds a run with a different configuration; "
                                  "use a clean work directory")
            self.stages = doc.get("stages", {})

    def done(self, stage: str) -> bool:
        with self._lock:
            return self.stages.get(stage, {}).get("status") == "done"

    def mark(self, stage: str, status: str, files: Sequence[str] = (), error: str | None = None,
             exit_code: int | None = None) -> None:
        entry: dict = {"status": status, "files": sorted(files)}
        if error is not None:
            entry.update(error=error, exit_code=exit_code)
        with self._lock:
            self.stages[stage] = entry
            self._write()

    def failures(self) -> dict[str, dict]:
        with self._lock:
            return {k: v for k, v in self.stages.items() if v["status"] == "failed"}

    def _write(self) -> None:
        doc = {"version": 1, "config_digest": self.digest, "stages": self.stages}
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        tmp.replace(self.path)


# ----------------------------------------------------------------------------
# pipeline


def _threads(env) -> int:
    raw = env.get("DGT_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DGT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DGT_THREADS must be a positive integer, got {raw!r}")
    return n


@dataclass
class PipelineResult:
    exit_code: int
    workdir: Path
    leaderboard: list[dict]
    failures: dict[str, dict]


class Pipeline:
    """Stages: ingest, graphs, one train+eval job per grid row, leaderboard, correlates, clustering."""

    def __init__(self, config: RunConfig, env: dict | None = None):
        self.config = config
        self.env = os.environ if env is None else env
        self.workdir = config.workdir
        self.manifest: Manifest | None = None

    def path(self, *parts) -> Path:
        return self.workdir.joinpath(*parts)

    def _rel(self, paths: Iterable[Path]) -> list[str]:
        return [p.relative_to(self.workdir).as_posix() for p in paths]

    def _stage(self, name: str, fn):
        """Run ``fn`` unless the manifest marks it done; record success or failure."""
        if self.manifest.done(name):
            log.info("stage %s already complete, skipping", name)
            return True
        log.info("stage %s", name)
        try:
            files = fn()
        except Exception as exc:  # recorded, then reported through the exit code
            code = exit_code_for(exc)
            log.error("stage %s failed: %s", name, exc)
            self.manifest.mark(name, "failed", error=f"{type(exc).__name__}: {exc}", exit_code=code)
            return False
        self.manifest.mark(name, "done", self._rel(files or ()))
        return True

    # -- individual stages ---------------------------------------------------

    def _dataset(self):
        pf = load_panel(self.path("panel.dgtp"))
        raw = denormalize(pf.panel, pf.stats)
        return prepare_dataset(raw, pf.block_len, pf.ratios, self.config.train.window_len)

    def _ingest(self):
        raw = load_price_csv(self.config.input_csv)
        data = prepare_dataset(raw, self.config.block_len, self.config.ratios, self.config.train.window_len)
        out = self.path("panel.dgtp")
        save_panel(data.panel, out, data.stats, self.config.block_len, self.config.ratios)
        return [out]

    def _graph_path(self, metric, scope) -> Path:
        return self.path("graphs", f"{metric}-{scope}.dgtg")

    def _graphs(self, data, metric, scope):
        def run():
            g = build_graph_set(data.panel, metric, scope, self.config.train.heads, data.spans["train"],
                                data.all_window_spans(), self.config.bins)
            out = self._graph_path(metric, scope)
            out.parent.mkdir(parents=True, exist_ok=True)
            save_graph_set(g, out)
            return [out]
        return run

    def _row_dir(self, row: GridRow) -> Path:
        return self.path("runs", row.label)

    def _train(self, data, row: GridRow):
        def run():
            cfg = row.train_config(self.config.train)
            graphs = load_graph_set(self._graph_path(row.metric, row.scope)) if row.metric != "none" else None
            lr, ckpt, report = grid_search(cfg, data, graphs)
            d = self._row_dir(row)
            d.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ckpt, d / "checkpoint.dgtc")
            (d / "log.csv").write_text(history_csv(ckpt.history), encoding="utf-8")
            grid_doc = {"selected_lr": lr, "runs": [vars(r) for r in report]}
            (d / "grid.json").write_text(json.dumps(grid_doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
            return [d / "checkpoint.dgtc", d / "log.csv", d / "grid.json"]
        return run

    def _eval(self, data, row: GridRow):
        def run():
            d = self._row_dir(row)
            ckpt = load_checkpoint(d / "checkpoint.dgtc", expect_arch=row.arch)
            graphs = load_graph_set(self._graph_path(row.metric, row.scope)) if row.metric != "none" else None
            report = backtest(ckpt, data.panel, data.test, graphs)
            if report.rmse < report.mae:
                raise EvaluationError(f"RMSE {report.rmse} below MAE {report.mae}")
            (d / "report.json").write_text(report.to_json(), encoding="utf-8")
            (d / "report.csv").write_text(report.to_csv(), encoding="utf-8")
            return [d / "report.json", d / "report.csv"]
        return run

    def _row_job(self, data, row: GridRow) -> None:
        if self._stage(f"train:{row.label}", self._train(data, row)):
            self._stage(f"eval:{row.label}", self._eval(data, row))

    def _load_report(self, row: GridRow) -> EvalReport:
        doc = json.loads((self._row_dir(row) / "report.json").read_text(encoding="utf-8"))
        return EvalReport.from_dict(doc)

    def _results(self) -> list[tuple[GridRow, EvalReport]]:
        return [(row, self._load_report(row)) for row in self.config.grid
                if self.manifest.done(f"eval:{row.label}")]

    def _leaderboard(self):
        rows = [{"architecture": r.arch.upper(), "use_spatial": r.use_spatial, "correlation": r.metric,
                 "scope": r.scope, "rmse": rep.rmse, "mae": rep.mae} for r, rep in self._results()]
        return [emit_report(rows, self.path("leaderboard.csv")), emit_report(rows, self.path("leaderboard.json"))]

    def _correlates(self, data):
        def run():
            out_dir = self.path("plots")
            out_dir.mkdir(parents=True, exist_ok=True)
            tickers = self.config.focus_tickers or data.panel.tickers[:1]
            metrics = sorted({r.metric for r in self.config.grid if r.metric != "none"}) or ["pearson"]
            s, e = data.spans["train"]
            k = min(self.config.top_k, data.panel.n_stocks - 1)
            files = []
            for metric in metrics:
                m = correlation_matrix(metric, data.panel.prices[:, s:e], data.panel.tickers, (s, e),
                                       "global", self.config.bins)
                for t in tickers:
                    top = top_correlated(m, t, k)
                    files.append(out_dir / f"top_{t}_{metric}.csv")
                    files[-1].write_text(topk_csv(top), encoding="utf-8")
                    files.append(out_dir / f"trace_{t}_{metric}.csv")
                    files[-1].write_text(trace_csv(data.panel, [t] + [name for name, _ in top]), encoding="utf-8")
            return files
        return run

    def _cluster(self, data):
        def run():
            out_dir = self.path("cluster")
            out_dir.mkdir(parents=True, exist_ok=True)
            feats = stock_features(data.raw, data.spans["train"])
            n = data.panel.n_stocks
            lo, hi = self.config.k_range
            ks = range(lo, min(hi, n - 1) + 1)
            scan = cluster_scan(feats, ks, self.config.cluster_seed) if len(ks) else []
            assignment = kmeans(feats, self.config.cluster_k, self.config.cluster_seed)
            (out_dir / "clusters.csv").write_text(clusters_csv(feats.tickers, assignment.labels), encoding="utf-8")
            (out_dir / "scan.csv").write_text(scan_csv(scan), encoding="utf-8")
            coords = pca_scatter(feats)
            (out_dir / "scatter.csv").write_text(scatter_csv(feats.tickers, coords, assignment.labels),
                                                 encoding="utf-8")
            summary = {"k": self.config.cluster_k, "seed": self.config.cluster_seed,
                       "inertia": assignment.inertia, "best_k_silhouette": best_k(scan) if scan else None}
            (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n",
                                                  encoding="utf-8")
            files = [out_dir / f for f in ("clusters.csv", "scan.csv", "scatter.csv", "summary.json")]
            if self.config.cluster_k == 2:
                files += self._comparisons(assignment.labels, out_dir)
            return files
        return run

    def _comparisons(self, labels, out_dir: Path) -> list[Path]:
        results = self._results()
        if not results:
            return []
        best = min(results, key=lambda item: (item[1].rmse, item[0].label))[0]
        chosen = [(r, rep) for r, rep in results if r.metric != "none" or r == best]
        pairs = [(r, compare_clusters(rep, labels, self.config.compare_test)) for r, rep in chosen]
        rows = comparison_rows(pairs)
        return [emit_report(rows, out_dir / "comparison.csv", columns=COMPARISON_COLUMNS, sort=False),
                emit_report(rows, out_dir / "comparison.json", columns=COMPARISON_COLUMNS, sort=False)]

    # -- driver --------------------------------------------------------------

    def run(self) -> PipelineResult:
        threads = _threads(self.env)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.manifest = Manifest(self.path(MANIFEST), self.config.digest())
        if not self._stage("ingest", self._ingest):
            return self._finish()
        data = self._dataset()
        graph_keys = sorted({(r.metric, r.scope) for r in self.config.grid if r.metric != "none"})
        ok_graphs = {key: self._stage(f"graphs:{key[0]}-{key[1]}", self._graphs(data, *key)) for key in graph_keys}
        rows = [r for r in self.config.grid if r.metric == "none" or ok_graphs[(r.metric, r.scope)]]
        if threads == 1 or len(rows) < 2:
            for row in rows:
                self._row_job(data, row)
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(lambda r: self._row_job(data, r), rows))
        # the report stages are cheap and depend on every row, so they are always rebuilt
        for stage in ("leaderboard", "correlates", "cluster"):
            self.manifest.stages.pop(stage, None)
        self._stage("leaderboard", self._leaderboard)
        self._stage("correlates", self._correlates(data))
        self._stage("cluster", self._cluster(data))
        return self._finish()

    def _finish(self) -> PipelineResult:
        failures = self.manifest.failures()
        code = EXIT_OK
        if failures:
            # the first failing stage in manifest order decides the exit status
            code = failures[sorted(failures)[0]]["exit_code"]
        board = []
        lb = self.path("leaderboard.json")
        if lb.exists():
            board = json.loads(lb.read_text(encoding="utf-8"))["rows"]
        return PipelineResult(code, self.workdir, board, failures)


def run_pipeline(config: RunConfig, env: dict | None = None) -> PipelineResult:
    return Pipeline(config, env).run()
