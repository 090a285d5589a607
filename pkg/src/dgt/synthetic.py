"""Synthetic price panels with known structure, for tests and demos."""
from __future__ import annotations

from datetime import date, timedelta

import numpy as np

from .ingest import PricePanel


def business_days(n: int, start: str = "2015-03-02") -> tuple[str, ...]:
    day = date.fromisoformat(start)
    out = []
    while len(out) < n:
        if day.weekday() < 5:
            out.append(day.isoformat())
        day += timedelta(days=1)
    return tuple(out)


def smooth_panel(n_stocks: int = 5, n_days: int = 130, seed: int = 0) -> PricePanel:
    """Sums of slow sinusoids around positive price levels."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_days)
    prices = np.empty((n_stocks, n_days))
    for i in range(n_stocks):
        level = rng.uniform(20, 200)
        series = np.zeros(n_days)
        for _ in range(3):
            period = rng.uniform(20, 90)
            series += rng.uniform(0.5, 1.5) * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
        prices[i] = level * (1.0 + 0.05 * series)
    return PricePanel([f"S{i}" for i in range(n_stocks)], business_days(n_days), prices)


def planted_panel(n_stocks: int = 8, n_days: int = 600, n_leaders: int = 2, noise: float = 0.05,
                  phi: float = 0.9, seed: int = 0) -> PricePanel:
    """Leader/follower panel: each follower is its leader lagged one day plus noise.

    Leaders are AR(1) processes with unit stationary variance.  Stocks are
    assigned round-robin, so with 8 stocks and 2 leaders, stocks 0 and 1 lead
    and stock ``i`` follows leader ``i % 2``.  Prices are ``level * (1 + 0.1 * x)``.
    """
    rng = np.random.default_rng(seed)
    innov = np.sqrt(1.0 - phi * phi)
    leaders = np.empty((n_leaders, n_days + 1))
    leaders[:, 0] = rng.normal(size=n_leaders)
    for t in range(1, n_days + 1):
        leaders[:, t] = phi * leaders[:, t - 1] + innov * rng.normal(size=n_leaders)
    x = np.empty((n_stocks, n_days))
    for i in range(n_stocks):
        src = leaders[i % n_leaders]
        if i < n_leaders:
            x[i] = src[1:]
        else:
            x[i] = src[:-1] + noise * rng.normal(size=n_days)
    levels = rng.uniform(20, 200, size=n_stocks)
    prices = levels[:, None] * (1.0 + 0.1 * x)
    tickers = [f"L{i}" if i < n_leaders else f"F{i}" for i in range(n_stocks)]
    return PricePanel(tickers, business_days(n_days), prices)


def planted_graph_matrix(n_stocks: int = 8, n_leaders: int = 2) -> np.ndarray:
    """Adjacency linking every stock to the members of its leader group."""
    group = np.arange(n_stocks) % n_leaders
    return (group[:, None] == group[None, :]).astype(float)


def two_blobs(n_per_blob: int = 50, n_features: int = 3, separation: float = 10.0, seed: int = 0):
    """Two isotropic Gaussian blobs; returns ``(points, true_labels)``."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n_per_blob, n_features))
    b = rng.normal(size=(n_per_blob, n_features)) + separation / np.sqrt(n_features)
    labels = np.repeat([0, 1], n_per_blob)
    return np.vstack([a, b]), labels
