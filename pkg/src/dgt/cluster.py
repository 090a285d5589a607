"""Stock clustering: return/volatility/beta features, k-means++, silhouette and elbow scans."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ingest import PricePanel

FEATURE_NAMES = ("mean_return", "return_std", "beta")


class ClusterError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureMatrix:
    tickers: tuple[str, ...]
    names: tuple[str, ...]
    values: np.ndarray  # (N, f), standardized across stocks
    mean: np.ndarray
    std: np.ndarray


@dataclass
class Assignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    k: int
    seed: int
    n_iter: int = 0
    history: list[float] = field(default_factory=list)


def raw_features(prices: np.ndarray) -> np.ndarray:
    """Mean simple return, return std, and beta against the equal-weight market return."""
    prices = np.asarray(prices, dtype=np.float64)
    returns = prices[:, 1:] / prices[:, :-1] - 1.0
    market = returns.mean(axis=0)
    var_m = market.var()
    if not var_m > 0:
        raise ClusterError("market return has zero variance; beta undefined")
    mr = returns.mean(axis=1)
    cov = ((returns - mr[:, None]) * (market - market.mean())).mean(axis=1)
    return np.column_stack([mr, returns.std(axis=1), cov / var_m])


def stock_features(panel: PricePanel, span: tuple[int, int] | None = None) -> FeatureMatrix:
    if panel.normalized:
        raise ClusterError("features need raw prices (returns are undefined on z-scores)")
    start, stop = span if span is not None else (0, panel.n_days)
    if stop - start < 30:
        raise ClusterError(f"feature span of {stop - start} days is shorter than 30")
    prices = panel.prices[:, start:stop]
    flat = np.ptp(prices, axis=1) == 0
    if flat.any():
        bad = [panel.tickers[i] for i in np.flatnonzero(flat)]
        raise ClusterError(f"constant price series: {', '.join(bad)}")
    raw = raw_features(prices)
    mean, std = raw.mean(axis=0), raw.std(axis=0)
    # relative threshold: identical series give betas equal only up to rounding
    scale = np.maximum(np.abs(raw).max(axis=0), 1e-300)
    degenerate = [n for n, s, m in zip(FEATURE_NAMES, std, scale) if s <= 1e-12 * m]
    if degenerate:
        raise ClusterError(f"zero cross-stock variance, cannot standardize: {', '.join(degenerate)}")
    return FeatureMatrix(panel.tickers, FEATURE_NAMES, (raw - mean) / std, mean, std)


def _as_points(features) -> np.ndarray:
    x = np.asarray(getattr(features, "values", features), dtype=np.float64)
    if x.ndim != 2 or not np.isfinite(x).all():
        raise ClusterError("features must be a finite 2-D array")
    return x


def _sq_dists(x, centroids):
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)


def _inertia(x, centroids, labels) -> float:
    # same summation path as the assignment step, so an unchanged state gives a bit-equal value
    return float(_sq_dists(x, centroids)[np.arange(x.shape[0]), labels].sum())


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        centers.append(x[idx])
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(features, k: int, seed: int = 0, max_iters: int = 300) -> Assignment:
    """Lloyd's algorithm from k-means++ seeds.

    An empty cluster is re-seeded at the point farthest from its current
    centroid (lowest index on ties).  Inertia is checked to be non-increasing
    after every assignment and update step.
    """
    x = _as_points(features)
    n = x.shape[0]
    if k < 2 or k > n:
        raise ClusterError(f"k must be in [2, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plus_plus(x, k, rng)
    labels = None
    history: list[float] = []

    def record(value):
        if history and value > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased from {history[-1]!r} to {value!r}")
        history.append(value)

    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, centroids)
        new_labels = d.argmin(axis=1)
        record(float(d[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        own = d[np.arange(n), labels]
        for c in range(k):
            if not (labels == c).any():
                counts = np.bincount(labels, minlength=k)
                movable = np.where(counts[labels] > 1, own, -np.inf)
                far = int(np.argmax(movable))
                labels[far] = c
                own[far] = 0.0
        for c in range(k):
            centroids[c] = x[labels == c].mean(axis=0)
        record(_inertia(x, centroids, labels))
    inertia = _inertia(x, centroids, labels)
    return Assignment(labels.copy(), centroids, inertia, k, seed, it, history)


def silhouette_samples(features, labels) -> np.ndarray:
    x = _as_points(features)
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < 2:
        raise ClusterError("silhouette needs at least two clusters")
    dist = np.sqrt(np.maximum(_sq_dists(x, x), 0.0))
    n = x.shape[0]
    sizes = {c: int((labels == c).sum()) for c in ids}
    mean_to = np.column_stack([dist[:, labels == c].sum(axis=1) for c in ids])
    out = np.zeros(n)
    for i in range(n):
        own = int(np.searchsorted(ids, labels[i]))
        if sizes[labels[i]] == 1:
            continue
        a = mean_to[i, own] / (sizes[labels[i]] - 1)
        b = min(mean_to[i, j] / sizes[c] for j, c in enumerate(ids) if j != own)
        denom = max(a, b)
        out[i] = 0.0 if denom == 0 else (b - a) / denom
    return out


def silhouette(features, assignment) -> float:
    labels = getattr(assignment, "labels", assignment)
    return float(silhouette_samples(features, labels).mean())


def _seed_for(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def inertia_curve(features, k_range: Sequence[int], seed: int = 0) -> list[tuple[int, float]]:
    x = _as_points(features)
    return [(k, kmeans(x, k, _seed_for(seed, k)).inertia) for k in k_range]


def cluster_scan(features, k_range: Sequence[int], seed: int = 0) -> list[tuple[int, float, float]]:
    """``(k, silhouette, inertia)`` for each k, one k-means run per k."""
    x = _as_points(features)
    rows = []
    for k in k_range:
        a = kmeans(x, k, _seed_for(seed, k))
        rows.append((k, silhouette(x, a), a.inertia))
    return rows


def best_k(scan: Sequence[tuple[int, float, float]]) -> int:
    """Silhouette argmax; ties go to the smaller k."""
    return max(scan, key=lambda row: (row[1], -row[0]))[0]


def pca_scatter(features, n_components: int = 2) -> np.ndarray:
    """Projection on the leading principal components, signs fixed so each axis's largest loading is positive."""
    x = _as_points(features)
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:n_components]
    flip = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    return xc @ (comps * flip[:, None]).T
