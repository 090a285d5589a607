"""Backtesting, RMSE / MAE, and cluster-conditional error comparison."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .corr import GraphSet
from .ingest import PricePanel, Window, window_arrays
from .train import Checkpoint, predict_windows, resolve_graphs


class EvaluationError(ValueError):
    pass


def _errors(pred, actual) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if pred.shape != actual.shape:
        raise EvaluationError(f"prediction ({pred.size}) and actual ({actual.size}) lengths differ")
    if pred.size == 0:
        raise EvaluationError("no values to score")
    return pred - actual


def rmse(pred, actual) -> float:
    e = _errors(pred, actual)
    return math.sqrt(float(np.mean(e * e)))


def mae(pred, actual) -> float:
    return float(np.mean(np.abs(_errors(pred, actual))))


@dataclass
class EvalReport:
    """Per-(window, stock) errors of a many-to-one backtest.

    ``actual`` and ``predicted`` are ``(n_windows, N)``; ``errors`` are
    ``predicted - actual``.
    """

    tickers: tuple[str, ...]
    window_starts: tuple[int, ...]
    target_days: tuple[int, ...]
    target_dates: tuple[str, ...]
    actual: np.ndarray
    predicted: np.ndarray
    tags: dict = field(default_factory=dict)
    units: str = "z"

    @property
    def errors(self) -> np.ndarray:
        return self.predicted - self.actual

    @property
    def rmse(self) -> float:
        return rmse(self.predicted, self.actual)

    @property
    def mae(self) -> float:
        return mae(self.predicted, self.actual)

    @property
    def n_cells(self) -> int:
        return self.actual.size

    def to_dict(self) -> dict:
        return {
            "tags": self.tags,
            "units": self.units,
            "rmse": self.rmse,
            "mae": self.mae,
            "n_cells": self.n_cells,
            "cells": [
                {
                    "ticker": t,
                    "window_start": self.window_starts[w],
                    "target_day": self.target_days[w],
                    "target_date": self.target_dates[w],
                    "actual": float(self.actual[w, i]),
                    "predicted": float(self.predicted[w, i]),
                    "error": float(self.errors[w, i]),
                }
                for w in range(len(self.window_starts))
                for i, t in enumerate(self.tickers)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        cells = doc["cells"]
        tickers = tuple(dict.fromkeys(c["ticker"] for c in cells))
        n = len(tickers)
        if not cells or len(cells) % n:
            raise EvaluationError("report cell table is empty or ragged")
        rows = [cells[i:i + n] for i in range(0, len(cells), n)]
        actual = np.array([[c["actual"] for c in r] for r in rows])
        predicted = np.array([[c["predicted"] for c in r] for r in rows])
        return cls(tickers, tuple(r[0]["window_start"] for r in rows), tuple(r[0]["target_day"] for r in rows),
                   tuple(r[0]["target_date"] for r in rows), actual, predicted, doc.get("tags", {}),
                   doc.get("units", "z"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["ticker", "window_start", "target_date", "actual", "predicted", "error"])
        for cell in self.to_dict()["cells"]:
            writer.writerow([cell["ticker"], cell["window_start"], cell["target_date"],
                             repr(cell["actual"]), repr(cell["predicted"]), repr(cell["error"])])
        return buf.getvalue()


Predictor = Callable[[np.ndarray, Sequence[Window]], np.ndarray]


def backtest(checkpoint: Checkpoint | None, panel: PricePanel, windows: Sequence[Window],
             graphs: GraphSet | None = None, predictor: Predictor | None = None,
             currency_units: bool = False) -> EvalReport:
    """Many-to-one predictions for every window and stock.

    ``panel`` must be normalized with the checkpoint's stats.  ``predictor``
    replaces the model when given; it receives the ``(B, N, L)`` inputs and
    the windows and returns ``(B, N)`` predictions.
    """
    windows = list(windows)
    if not windows:
        raise EvaluationError("no test windows")
    if any(len(w.targets) != 1 for w in windows):
        raise EvaluationError("backtest needs many-to-one windows")
    if not panel.normalized:
        raise EvaluationError("backtest expects a normalized panel")
    x, y = window_arrays(panel, windows)
    actual = y[..., 0]
    tags: dict = {}
    if predictor is not None:
        predicted = np.asarray(predictor(x, windows), dtype=np.float64)
    else:
        if checkpoint is None:
            raise EvaluationError("need a checkpoint or a predictor")
        if checkpoint.stats.tickers != panel.tickers:
            raise EvaluationError("checkpoint normalization stats do not match the panel tickers")
        cfg = checkpoint.train_config
        graphs = resolve_graphs(cfg, graphs, panel.n_stocks)
        if graphs is not None and graphs.scope != "global":
            missing = [w.key for w in windows if w.key not in graphs.local]
            if missing:
                raise EvaluationError(f"graph set lacks local matrices for {len(missing)} windows (first at day {missing[0]})")
        predicted = predict_windows(checkpoint.params, panel, windows, graphs)
        tags = {"architecture": cfg.arch, "use_spatial": cfg.use_spatial, "metric": cfg.metric, "scope": cfg.scope}
    if predicted.shape != actual.shape:
        raise EvaluationError(f"predictions {predicted.shape} do not match targets {actual.shape}")
    units = "z"
    if currency_units:
        if checkpoint is None:
            raise EvaluationError("currency units need the checkpoint's normalization stats")
        actual = checkpoint.stats.denormalize(actual.T).T
        predicted = checkpoint.stats.denormalize(predicted.T).T
        units = "currency"
    targets = tuple(w.targets[0] for w in windows)
    return EvalReport(panel.tickers, tuple(w.start for w in windows), targets,
                      tuple(panel.dates[t] for t in targets), actual, predicted, tags, units)


# ----------------------------------------------------------------------------
# cluster comparison


@dataclass
class ClusterComparison:
    labels: tuple[int, int]
    rmse: tuple[float, float]
    mae: tuple[float, float]
    n_stocks: tuple[int, int]
    n_cells: tuple[int, int]
    p_rmse: float
    p_mae: float
    test: str

    def to_dict(self) -> dict:
        return {
            "clusters": list(self.labels),
            "rmse": list(self.rmse),
            "mae": list(self.mae),
            "n_stocks": list(self.n_stocks),
            "n_cells": list(self.n_cells),
            "p_rmse": self.p_rmse,
            "p_mae": self.p_mae,
            "test": self.test,
        }


def _location_test(a, b, test):
    if test == "welch":
        res = stats.ttest_ind(a, b, equal_var=False)
    elif test == "mannwhitney":
        res = stats.mannwhitneyu(a, b, alternative="two-sided")
    else:
        raise ValueError(f"unknown test {test!r}; use 'welch' or 'mannwhitney'")
    p = float(res.pvalue)
    return 1.0 if math.isnan(p) else min(max(p, 0.0), 1.0)


def compare_clusters(report: EvalReport, labels, test: str = "welch") -> ClusterComparison:
    """Pooled RMSE/MAE per cluster plus significance of the differences.

    Each stock is summarized by its mean squared error (for the RMSE
    comparison) and its mean absolute error (for MAE); the two clusters'
    summaries are compared with Welch's unequal-variance t-test, or the
    Mann-Whitney rank test when ``test="mannwhitney"``.
    """
    labels = np.asarray(labels)
    if labels.shape != (len(report.tickers),):
        raise EvaluationError(f"need one label per stock ({len(report.tickers)}), got {labels.shape}")
    ids = sorted(set(labels.tolist()))
    if len(ids) != 2:
        raise EvaluationError(f"cluster comparison needs exactly two clusters, got {len(ids)}")
    err = report.errors
    per_sq = (err * err).mean(axis=0)
    per_abs = np.abs(err).mean(axis=0)
    groups = [labels == c for c in ids]
    rm = tuple(math.sqrt(float(np.mean(err[:, g] ** 2))) for g in groups)
    ma = tuple(float(np.mean(np.abs(err[:, g]))) for g in groups)
    return ClusterComparison(
        tuple(ids), rm, ma,
        tuple(int(g.sum()) for g in groups),
        tuple(int(g.sum()) * err.shape[0] for g in groups),
        _location_test(per_sq[groups[0]], per_sq[groups[1]], test),
        _location_test(per_abs[groups[0]], per_abs[groups[1]], test),
        test,
    )
