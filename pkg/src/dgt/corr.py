"""Correlation estimators over price slices and the graph sets built from them.

Every estimator takes an ``(N, W)`` slice (stocks by days) and returns an
``N x N`` :class:`CorrMatrix`.  Pairwise values are computed once for the
upper triangle and mirrored, so every matrix is exactly symmetric.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numba
import numpy as np
from scipy.stats import rankdata

METRICS = ("pearson", "spearman", "kendall", "mi")
SCOPES = ("global", "local", "dual")
DEFAULT_BINS = 16

GRAPH_MAGIC = b"DGTG"
GRAPH_VERSION = 1


class CorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class CorrMatrix:
    metric: str
    scope_tag: str
    span: tuple[int, int]
    values: np.ndarray
    tickers: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class DeltaMatrix:
    values: np.ndarray
    t: int = 0


def _names(tickers, n):
    return tuple(tickers) if tickers else tuple(f"row{i}" for i in range(n))


def _check_slice(data, tickers, min_width=3):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise CorrelationError(f"expected an (N, W) slice, got shape {data.shape}")
    if data.shape[1] < min_width:
        raise CorrelationError(f"need at least {min_width} days, got {data.shape[1]}")
    if not np.isfinite(data).all():
        raise CorrelationError("slice contains non-finite values")
    names = _names(tickers, data.shape[0])
    flat = np.ptp(data, axis=1) == 0
    if flat.any():
        bad = [names[i] for i in np.flatnonzero(flat)]
        raise CorrelationError(f"constant series, correlation undefined: {', '.join(bad)}")
    return data, names


def _symmetrize(full: np.ndarray) -> np.ndarray:
    upper = np.triu(full, 1)
    out = upper + upper.T
    np.fill_diagonal(out, 1.0)
    return out


def _pearson_values(data):
    centered = data - data.mean(axis=1, keepdims=True)
    z = centered / np.sqrt((centered * centered).sum(axis=1, keepdims=True))
    return np.clip(_symmetrize(z @ z.T), -1.0, 1.0)


def pearson_matrix(data, tickers=(), span=(0, 0), scope_tag="global") -> CorrMatrix:
    data, names = _check_slice(data, tickers)
    return CorrMatrix("pearson", scope_tag, tuple(span), _pearson_values(data), names)


def average_ranks(data) -> np.ndarray:
    """Row-wise ranks starting at 1, ties sharing their mean rank."""
    return rankdata(np.asarray(data, dtype=np.float64), method="average", axis=1)


def spearman_matrix(data, tickers=(), span=(0, 0), scope_tag="global") -> CorrMatrix:
    data, names = _check_slice(data, tickers)
    return CorrMatrix("spearman", scope_tag, tuple(span), _pearson_values(average_ranks(data)), names)


# ----------------------------------------------------------------------------
# Kendall tau-b, Knight's merge-count algorithm


@numba.njit(cache=True)
def _tie_pairs(sorted_vals):
    total = 0
    run = 1
    for i in range(1, sorted_vals.shape[0]):
        if sorted_vals[i] == sorted_vals[i - 1]:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    return total + run * (run - 1) // 2


@numba.njit(cache=True)
def _count_inversions(y):
    """Strict inversions (i < j, y[i] > y[j]) by bottom-up merge sort."""
    n = y.shape[0]
    a = y.copy()
    buf = np.empty_like(a)
    swaps = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if a[j] < a[i]:
                    buf[k] = a[j]
                    swaps += mid - i
                    j += 1
                else:
                    buf[k] = a[i]
                    i += 1
                k += 1
            while i < mid:
                buf[k] = a[i]
                i += 1
                k += 1
            while j < hi:
                buf[k] = a[j]
                j += 1
                k += 1
        a, buf = buf, a
        width *= 2
    return swaps


@numba.njit(cache=True)
def _kendall_counts(x, y):
    """Return (C - D, n0 - n1, n0 - n2) as integers."""
    n = x.shape[0]
    order = np.argsort(y, kind="mergesort")
    order = order[np.argsort(x[order], kind="mergesort")]
    xs = x[order]
    ys = y[order]
    n0 = n * (n - 1) // 2
    n1 = _tie_pairs(xs)
    # pairs tied in both x and y: runs of equal (x, y) in lexicographic order
    n3 = 0
    run = 1
    for i in range(1, n):
        if xs[i] == xs[i - 1] and ys[i] == ys[i - 1]:
            run += 1
        else:
            n3 += run * (run - 1) // 2
            run = 1
    n3 += run * (run - 1) // 2
    swaps = _count_inversions(ys)
    n2 = _tie_pairs(np.sort(y))
    return n0 - n1 - n2 + n3 - 2 * swaps, n0 - n1, n0 - n2


@numba.njit(cache=True)
def _kendall_matrix_counts(data):
    n = data.shape[0]
    num = np.zeros((n, n), dtype=np.int64)
    den_x = np.ones((n, n), dtype=np.int64)
    den_y = np.ones((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            c, a, b = _kendall_counts(data[i], data[j])
            num[i, j] = c
            den_x[i, j] = a
            den_y[i, j] = b
    return num, den_x, den_y


def kendall_tau_b(x, y) -> float:
    """Tie-corrected Kendall rank correlation of two series in O(W log W)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise CorrelationError(f"series shapes differ: {x.shape} vs {y.shape}")
    num, a, b = (int(v) for v in _kendall_counts(x, y))
    if a == 0 or b == 0:
        raise CorrelationError("all-tied series, Kendall tau-b undefined")
    return num / math.sqrt(a * b)


def kendall_matrix(data, tickers=(), span=(0, 0), scope_tag="global") -> CorrMatrix:
    data, names = _check_slice(data, tickers)
    num, den_x, den_y = _kendall_matrix_counts(np.ascontiguousarray(data))
    iu = np.triu_indices(data.shape[0], 1)
    full = np.zeros((data.shape[0], data.shape[0]))
    full[iu] = num[iu] / np.sqrt((den_x[iu] * den_y[iu]).astype(np.float64))
    return CorrMatrix("kendall", scope_tag, tuple(span), np.clip(_symmetrize(full), -1.0, 1.0), names)


# ----------------------------------------------------------------------------
# mutual information


def histogram_bins(data, bins: int) -> np.ndarray:
    """Equal-width bin index per entry, each row binned over its own range."""
    data = np.asarray(data, dtype=np.float64)
    lo = data.min(axis=-1, keepdims=True)
    width = np.ptp(data, axis=-1, keepdims=True)
    idx = np.floor((data - lo) / width * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


def _mi_from_bins(bx, by, bins):
    n = bx.shape[0]
    joint = np.bincount(bx * bins + by, minlength=bins * bins).reshape(bins, bins) / n
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / np.outer(px, py)[nz])).sum())


def mutual_info(x, y, bins: int = DEFAULT_BINS) -> float:
    """Histogram mutual information in nats (not normalized)."""
    pair = np.vstack([x, y])
    _check_slice(pair, ("x", "y"), min_width=2)
    b = histogram_bins(pair, bins)
    return _mi_from_bins(b[0], b[1], bins)


def mutual_info_matrix(data, bins: int = DEFAULT_BINS, tickers=(), span=(0, 0), scope_tag="global") -> CorrMatrix:
    """Pairwise MI normalized by ``ln(bins)`` and clipped to [0, 1]."""
    if bins < 2:
        raise CorrelationError(f"bins must be >= 2, got {bins}")
    data, names = _check_slice(data, tickers)
    b = histogram_bins(data, bins)
    n = data.shape[0]
    full = np.zeros((n, n))
    norm = math.log(bins)
    for i in range(n):
        for j in range(i + 1, n):
            full[i, j] = _mi_from_bins(b[i], b[j], bins) / norm
    return CorrMatrix("mi", scope_tag, tuple(span), np.clip(_symmetrize(full), 0.0, 1.0), names)


ESTIMATORS = {
    "pearson": pearson_matrix,
    "spearman": spearman_matrix,
    "kendall": kendall_matrix,
    "mi": mutual_info_matrix,
}


def correlation_matrix(metric: str, data, tickers=(), span=(0, 0), scope_tag="global", bins=DEFAULT_BINS) -> CorrMatrix:
    if metric not in ESTIMATORS:
        raise ValueError(f"unknown metric {metric!r}; choose from {', '.join(METRICS)}")
    if metric == "mi":
        return mutual_info_matrix(data, bins, tickers, span, scope_tag)
    return ESTIMATORS[metric](data, tickers, span, scope_tag)


# ----------------------------------------------------------------------------
# graph sets


@dataclass
class GraphSet:
    """Per-head adjacency assignment for every window.

    ``global_matrix`` covers the training span; ``local`` maps a window key
    (its first input day) to the matrix over that window's input days.  In
    dual scope even heads read the global matrix and odd heads the local one.
    """

    scope: str
    metric: str
    heads: int
    global_matrix: CorrMatrix | None = None
    local: dict[int, CorrMatrix] = field(default_factory=dict)

    def head_sources(self, key: int | None = None) -> list[CorrMatrix]:
        if self.scope == "global":
            return [self.global_matrix] * self.heads
        if key not in self.local:
            raise KeyError(f"no local matrix for window starting at day {key}")
        if self.scope == "local":
            return [self.local[key]] * self.heads
        return [self.global_matrix if h % 2 == 0 else self.local[key] for h in range(self.heads)]

    def adjacency(self, key: int | None = None) -> np.ndarray:
        """``(H, N, N)`` stack of adjacency values for one window."""
        return np.stack([m.values for m in self.head_sources(key)])

    def batch(self, keys: Sequence[int]) -> np.ndarray:
        """``(H, N, N)`` when shared by every window, else ``(B, H, N, N)``."""
        if self.scope == "global":
            return self.adjacency()
        return np.stack([self.adjacency(k) for k in keys])


def ones_graph(n_stocks: int, heads: int) -> GraphSet:
    """Uninformative prior: every adjacency entry is 1."""
    m = CorrMatrix("none", "global", (0, 0), np.ones((n_stocks, n_stocks)))
    return GraphSet("global", "none", heads, m)


def build_graph_set(panel, metric: str, scope: str, heads: int, train_span=None,
                    window_spans: Sequence[tuple[int, int]] = (), bins: int = DEFAULT_BINS) -> GraphSet:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; choose from {', '.join(SCOPES)}")
    if heads < 1:
        raise ValueError("heads must be >= 1")
    if scope == "dual" and heads < 2:
        raise ValueError("dual scope needs at least 2 heads")
    graphs = GraphSet(scope, metric, heads)
    if scope in ("global", "dual"):
        if train_span is None:
            raise ValueError(f"{scope} scope needs the training span")
        s, e = train_span
        graphs.global_matrix = correlation_matrix(metric, panel.prices[:, s:e], panel.tickers, (s, e), "global", bins)
    if scope in ("local", "dual"):
        if not window_spans:
            raise ValueError(f"{scope} scope needs window spans")
        for s, e in window_spans:
            if s in graphs.local:
                continue
            try:
                graphs.local[s] = correlation_matrix(metric, panel.prices[:, s:e], panel.tickers, (s, e), "local", bins)
            except CorrelationError as exc:
                raise CorrelationError(f"window [{s}, {e}): {exc}") from None
    return graphs


def delta_graph(current, previous, t: int = 0) -> DeltaMatrix:
    """Elementwise change between consecutive adjacency matrices."""
    a = np.asarray(getattr(current, "values", current), dtype=np.float64)
    b = np.asarray(getattr(previous, "values", previous), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"matrix shapes differ: {a.shape} vs {b.shape}")
    if getattr(current, "metric", None) != getattr(previous, "metric", None):
        raise ValueError("delta between matrices of different metrics")
    return DeltaMatrix(a - b, t)


def top_correlated(matrix: CorrMatrix, ticker: str, k: int) -> list[tuple[str, float]]:
    """The ``k`` largest off-diagonal entries of ``ticker``'s row, ties by ticker name."""
    if ticker not in matrix.tickers:
        raise KeyError(f"unknown ticker {ticker!r}")
    n = len(matrix.tickers)
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    i = matrix.tickers.index(ticker)
    row = [(matrix.tickers[j], float(matrix.values[i, j])) for j in range(n) if j != i]
    row.sort(key=lambda item: (-item[1], item[0]))
    return row[:k]


# ----------------------------------------------------------------------------
# persistence


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf, pos):
    (n,) = struct.unpack_from("<H", buf, pos)
    return bytes(buf[pos + 2:pos + 2 + n]).decode("utf-8"), pos + 2 + n


def save_graph_set(graphs: GraphSet, path) -> None:
    """Write the ``DGTG`` format: header, ticker table, then keyed matrices."""
    mats: list[tuple[int, CorrMatrix]] = []
    if graphs.global_matrix is not None:
        mats.append((-1, graphs.global_matrix))
    mats.extend(sorted(graphs.local.items()))
    tickers = mats[0][1].tickers if mats else ()
    n = len(tickers)
    out = bytearray(GRAPH_MAGIC)
    out += struct.pack("<H", GRAPH_VERSION)
    out += _pack_str(graphs.metric) + _pack_str(graphs.scope)
    out += struct.pack("<III", graphs.heads, n, len(mats))
    for t in tickers:
        out += _pack_str(t)
    for key, m in mats:
        out += struct.pack("<qqq", key, *m.span)
        out += np.ascontiguousarray(m.values, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_graph_set(path) -> GraphSet:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:4]) != GRAPH_MAGIC:
        raise CorrelationError(f"{path}: not a DGTG graph file")
    try:
        (version,) = struct.unpack_from("<H", buf, 4)
        if version != GRAPH_VERSION:
            raise CorrelationError(f"{path}: unsupported graph version {version}")
        metric, pos = _unpack_str(buf, 6)
        scope, pos = _unpack_str(buf, pos)
        heads, n, count = struct.unpack_from("<III", buf, pos)
        pos += 12
        tickers = []
        for _ in range(n):
            t, pos = _unpack_str(buf, pos)
            tickers.append(t)
        graphs = GraphSet(scope, metric, heads)
        for _ in range(count):
            key, s, e = struct.unpack_from("<qqq", buf, pos)
            pos += 24
            values = np.frombuffer(buf, dtype="<f8", count=n * n, offset=pos).reshape(n, n).astype(np.float64)
            pos += 8 * n * n
            tag = "global" if key < 0 else "local"
            m = CorrMatrix(metric, tag, (s, e), values, tuple(tickers))
            if key < 0:
                graphs.global_matrix = m
            else:
                graphs.local[key] = m
    except struct.error as exc:
        raise CorrelationError(f"{path}: truncated graph file ({exc})") from None
    return graphs
