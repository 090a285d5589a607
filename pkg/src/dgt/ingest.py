"""Price-panel loading, cleaning, z-score normalization, block partitioning and windowing."""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

MANY_TO_MANY = "many_to_many"
MANY_TO_ONE = "many_to_one"

PANEL_MAGIC = b"DGTP"
PANEL_VERSION = 1


class DataError(ValueError):
    """Malformed or unusable market data."""


@dataclass(frozen=True)
class PricePanel:
    tickers: tuple[str, ...]
    dates: tuple[str, ...]
    prices: np.ndarray  # (N, T)
    normalized: bool = False
    dropped: tuple[str, ...] = ()

    def __post_init__(self):
        prices = np.asarray(self.prices, dtype=np.float64)
        object.__setattr__(self, "tickers", tuple(self.tickers))
        object.__setattr__(self, "dates", tuple(self.dates))
        if prices.shape != (len(self.tickers), len(self.dates)):
            raise DataError(f"price matrix {prices.shape} does not match {len(self.tickers)} tickers x {len(self.dates)} dates")
        if len(set(self.tickers)) != len(self.tickers):
            raise DataError("duplicate tickers")
        if any(a >= b for a, b in zip(self.dates, self.dates[1:])):
            raise DataError("dates must be strictly increasing")
        if not np.isfinite(prices).all():
            raise DataError("prices contain non-finite values")
        prices.setflags(write=False)
        object.__setattr__(self, "prices", prices)

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    def index_of(self, ticker: str) -> int:
        try:
            return self.tickers.index(ticker)
        except ValueError:
            raise KeyError(f"unknown ticker {ticker!r}") from None

    def subset(self, tickers: Sequence[str]) -> "PricePanel":
        rows = [self.index_of(t) for t in tickers]
        return replace(self, tickers=tuple(tickers), prices=self.prices[rows])


@dataclass(frozen=True)
class NormStats:
    tickers: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    span: tuple[int, int]  # day indices [start, stop)

    def denormalize(self, values: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        """Map z-units back to currency units.  ``values`` has stocks on axis 0."""
        mean, std = self.mean, self.std
        if rows is not None:
            mean, std = mean[rows], std[rows]
        shape = (-1,) + (1,) * (np.ndim(values) - 1)
        return values * std.reshape(shape) + mean.reshape(shape)


@dataclass(frozen=True)
class BlockPartition:
    block_len: int
    blocks: tuple[tuple[int, int], ...]  # [start, stop) day indices

    def __len__(self):
        return len(self.blocks)

    def span(self, block_ids: range) -> tuple[int, int]:
        return self.blocks[block_ids[0]][0], self.blocks[block_ids[-1]][1]


@dataclass(frozen=True)
class SplitSpec:
    train_blocks: range
    val_blocks: range
    test_blocks: range

    def spans(self, partition: BlockPartition) -> dict[str, tuple[int, int]]:
        return {
            "train": partition.span(self.train_blocks),
            "val": partition.span(self.val_blocks),
            "test": partition.span(self.test_blocks),
        }


@dataclass(frozen=True)
class Window:
    start: int  # first input day
    inputs: tuple[int, int]  # [start, stop)
    targets: tuple[int, ...]

    @property
    def key(self) -> int:
        return self.start


@dataclass(frozen=True)
class WindowSet:
    window_len: int
    mode: str
    windows: tuple[Window, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)


# ----------------------------------------------------------------------------
# loading


def _parse_date(text: str, lineno: int) -> str:
    try:
        return date.fromisoformat(text.strip()).isoformat()
    except ValueError:
        raise DataError(f"line {lineno}: cannot parse date {text!r}") from None


def load_price_csv(path) -> PricePanel:
    """Read a ``date,<TICKER>,...`` close-price CSV.

    Tickers with any empty cell are dropped (their history does not span the
    full date range) and listed in ``PricePanel.dropped``.  Unparseable
    numbers raise :class:`DataError` with the offending line number.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        tickers = [h.strip() for h in header[1:]]
        if not tickers:
            raise DataError(f"{path}: header has no ticker columns")
        dates, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            dates.append(_parse_date(row[0], lineno))
            values = []
            for cell in row[1:]:
                cell = cell.strip()
                if not cell:
                    values.append(math.nan)
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"line {lineno}: cannot parse price {cell!r}") from None
            rows.append(values)

    if not dates:
        raise DataError(f"{path}: no data rows")
    for i, (a, b) in enumerate(zip(dates, dates[1:])):
        if a >= b:
            raise DataError(f"dates not strictly increasing at row {i + 3}: {a} then {b}")

    prices = np.array(rows, dtype=np.float64).T
    complete = np.isfinite(prices).all(axis=1)
    dropped = tuple(t for t, ok in zip(tickers, complete) if not ok)
    if dropped:
        log.info("dropping %d tickers with incomplete history: %s", len(dropped), ", ".join(dropped))
    if not complete.any():
        raise DataError(f"{path}: no ticker has a complete price history")
    kept = tuple(t for t, ok in zip(tickers, complete) if ok)
    return PricePanel(kept, tuple(dates), prices[complete], dropped=dropped)


def write_price_csv(panel: PricePanel, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date", *panel.tickers])
        for t, d in enumerate(panel.dates):
            writer.writerow([d, *(repr(float(v)) for v in panel.prices[:, t])])


# ----------------------------------------------------------------------------
# normalization


def zscore_normalize(panel: PricePanel, train_span: tuple[int, int]) -> tuple[PricePanel, NormStats]:
    """Standardize each stock by its mean and population std over ``train_span``."""
    if panel.normalized:
        raise DataError("panel is already normalized")
    start, stop = train_span
    if not 0 <= start < stop <= panel.n_days:
        raise DataError(f"train span {train_span} is empty or outside the panel")
    train = panel.prices[:, start:stop]
    mean = train.mean(axis=1)
    std = train.std(axis=1)
    zero = [t for t, s in zip(panel.tickers, std) if not s > 0]
    if zero:
        raise DataError(f"zero variance over the training span for: {', '.join(zero)}")
    z = (panel.prices - mean[:, None]) / std[:, None]
    stats = NormStats(panel.tickers, mean, std, (start, stop))
    return replace(panel, prices=z, normalized=True), stats


def apply_norm(panel: PricePanel, stats: NormStats) -> PricePanel:
    """Normalize a raw panel with previously fitted stats."""
    if panel.normalized:
        raise DataError("panel is already normalized")
    if panel.tickers != stats.tickers:
        raise DataError("normalization stats were fitted on a different ticker set")
    z = (panel.prices - stats.mean[:, None]) / stats.std[:, None]
    return replace(panel, prices=z, normalized=True)


def denormalize(panel: PricePanel, stats: NormStats) -> PricePanel:
    if not panel.normalized:
        raise DataError("panel is not normalized")
    return replace(panel, prices=stats.denormalize(panel.prices), normalized=False)


# ----------------------------------------------------------------------------
# partitioning


def partition_blocks(n_days: int, block_len: int = 64) -> BlockPartition:
    """Cut ``n_days`` into consecutive blocks of ``block_len`` days.

    A trailing remainder shorter than ``block_len / 2`` is merged into the
    previous block; a longer one stands as its own block.
    """
    if isinstance(n_days, PricePanel):
        n_days = n_days.n_days
    if block_len < 2:
        raise ValueError(f"block_len must be >= 2, got {block_len}")
    if n_days < block_len:
        raise DataError(f"{n_days} days is fewer than one block of {block_len}")
    starts = list(range(0, n_days, block_len))
    blocks = [(s, min(s + block_len, n_days)) for s in starts]
    last = blocks[-1]
    if len(blocks) > 1 and last[1] - last[0] < block_len / 2:
        blocks[-2:] = [(blocks[-2][0], last[1])]
    return BlockPartition(block_len, tuple(blocks))


def split_blocks(partition: BlockPartition | int, ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> SplitSpec:
    """Chronological train/val/test split over blocks.

    Train and validation sizes are ``round(ratio * n_blocks)``; the test split
    takes the remainder.
    """
    n = partition if isinstance(partition, int) else len(partition)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive fractions summing to 1, got {tuple(ratios)}")
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"{n} blocks cannot be split {tuple(ratios)} without an empty partition")
    return SplitSpec(
        range(0, n_train),
        range(n_train, n_train + n_val),
        range(n_train + n_val, n),
    )


# ----------------------------------------------------------------------------
# windows


def block_windows(partition: BlockPartition, block_ids: range, n_days: int, window_len: int) -> WindowSet:
    """Many-to-many windows, one per block.

    Each window holds ``window_len`` days starting at the block start (or
    ending at the block end when the block is shorter), and every input day
    targets its successor.  The last day of the panel has no successor, so a
    window touching it loses its final target.
    """
    if n_days < window_len + 1:
        raise DataError(f"{n_days} days cannot hold a window of {window_len} plus a target")
    windows = []
    for b in block_ids:
        start, stop = partition.blocks[b]
        if stop - start < window_len:
            start = max(0, stop - window_len)
        stop = start + window_len
        targets = tuple(t + 1 for t in range(start, stop) if t + 1 < n_days)
        windows.append(Window(start, (start, stop), targets))
    return WindowSet(window_len, MANY_TO_MANY, tuple(windows))


def make_windows(n_days: int, span: tuple[int, int], window_len: int, mode: str = MANY_TO_ONE) -> WindowSet:
    """Windows over the day range ``span = [start, stop)``.

    many_to_one
        One window per target day in ``span`` whose trailing ``window_len``
        days exist; the input may reach back before ``span``.
    many_to_many
        Consecutive non-overlapping ``window_len``-day windows tiling the span
        from its start, each day targeting its successor.
    """
    if isinstance(n_days, PricePanel):
        n_days = n_days.n_days
    start, stop = span
    if not 0 <= start < stop <= n_days:
        raise DataError(f"span {span} outside a panel of {n_days} days")
    if mode == MANY_TO_ONE:
        first = max(start, window_len)
        if first >= stop:
            raise DataError(f"span {span} has no target day with {window_len} days of history")
        windows = tuple(Window(t - window_len, (t - window_len, t), (t,)) for t in range(first, stop))
    elif mode == MANY_TO_MANY:
        if stop - start < window_len:
            raise DataError(f"span {span} is shorter than the window length {window_len}")
        windows = []
        for s in range(start, stop - window_len + 1, window_len):
            targets = tuple(t + 1 for t in range(s, s + window_len) if t + 1 < n_days)
            windows.append(Window(s, (s, s + window_len), targets))
        windows = tuple(windows)
    else:
        raise ValueError(f"unknown window mode {mode!r}")
    return WindowSet(window_len, mode, windows)


def window_arrays(panel: PricePanel, windows: WindowSet | Sequence[Window]) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows into ``(B, N, L)`` inputs and ``(B, N, n_targets)`` targets.

    All windows must have the same number of targets.
    """
    windows = list(windows)
    counts = {len(w.targets) for w in windows}
    if len(counts) != 1:
        raise ValueError("windows have differing target counts; stack them separately")
    x = np.stack([panel.prices[:, w.inputs[0]:w.inputs[1]] for w in windows])
    y = np.stack([panel.prices[:, list(w.targets)] for w in windows])
    return x, y


# ----------------------------------------------------------------------------
# persistence


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: memoryview, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    return bytes(buf[pos:pos + n]).decode("utf-8"), pos + n


def save_panel(panel: PricePanel, path, stats: NormStats | None = None, block_len: int = 64,
               ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> None:
    """Write the ``DGTP`` binary panel format (see README for the layout)."""
    out = bytearray(PANEL_MAGIC)
    out += struct.pack("<HIIB", PANEL_VERSION, panel.n_stocks, panel.n_days, int(panel.normalized))
    out += struct.pack("<I3d", block_len, *ratios)
    for t in panel.tickers:
        out += _pack_str(t)
    for d in panel.dates:
        out += _pack_str(d)
    out += np.ascontiguousarray(panel.prices, dtype="<f8").tobytes()
    out += struct.pack("<B", stats is not None)
    if stats is not None:
        out += struct.pack("<II", *stats.span)
        out += np.asarray(stats.mean, dtype="<f8").tobytes()
        out += np.asarray(stats.std, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


@dataclass(frozen=True)
class PanelFile:
    panel: PricePanel
    stats: NormStats | None
    block_len: int
    ratios: tuple[float, float, float]


def load_panel(path) -> PanelFile:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:4]) != PANEL_MAGIC:
        raise DataError(f"{path}: not a DGTP panel file")
    try:
        version, n, t, normalized = struct.unpack_from("<HIIB", buf, 4)
        if version != PANEL_VERSION:
            raise DataError(f"{path}: unsupported panel version {version}")
        pos = 4 + struct.calcsize("<HIIB")
        block_len, *ratios = struct.unpack_from("<I3d", buf, pos)
        pos += struct.calcsize("<I3d")
        tickers, dates = [], []
        for _ in range(n):
            s, pos = _unpack_str(buf, pos)
            tickers.append(s)
        for _ in range(t):
            s, pos = _unpack_str(buf, pos)
            dates.append(s)
        prices = np.frombuffer(buf, dtype="<f8", count=n * t, offset=pos).reshape(n, t).astype(np.float64)
        pos += 8 * n * t
        (has_stats,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        stats = None
        if has_stats:
            span = struct.unpack_from("<II", buf, pos)
            pos += 8
            mean = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
            std = np.frombuffer(buf, dtype="<f8", count=n, offset=pos + 8 * n).astype(np.float64)
            stats = NormStats(tuple(tickers), mean, std, tuple(span))
    except struct.error as exc:
        raise DataError(f"{path}: truncated panel file ({exc})") from None
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: truncated panel file ({exc})") from None
    panel = PricePanel(tuple(tickers), tuple(dates), prices, normalized=bool(normalized))
    return PanelFile(panel, stats, block_len, tuple(ratios))


# ----------------------------------------------------------------------------
# assembled splits


@dataclass(frozen=True)
class Dataset:
    """A normalized panel with its block split and the windows of every split."""

    raw: PricePanel
    panel: PricePanel
    stats: NormStats
    partition: BlockPartition
    split: SplitSpec
    train: WindowSet
    val: WindowSet
    test: WindowSet

    @property
    def window_len(self) -> int:
        return self.train.window_len

    @property
    def spans(self) -> dict[str, tuple[int, int]]:
        return self.split.spans(self.partition)

    def all_window_spans(self) -> list[tuple[int, int]]:
        seen = {}
        for ws in (self.train, self.val, self.test):
            for w in ws:
                seen.setdefault(w.start, w.inputs)
        return [seen[k] for k in sorted(seen)]


def prepare_dataset(raw: PricePanel, block_len: int = 64, ratios: Sequence[float] = (0.8, 0.1, 0.1),
                    window_len: int | None = None) -> Dataset:
    """Partition, split, normalize on the training span, and window every split.

    Training uses block-aligned many-to-many windows; validation and test use
    one many-to-one window per target day.
    """
    window_len = window_len or block_len
    partition = partition_blocks(raw.n_days, block_len)
    split = split_blocks(partition, ratios)
    spans = split.spans(partition)
    panel, stats = zscore_normalize(raw, spans["train"])
    train = block_windows(partition, split.train_blocks, raw.n_days, window_len)
    val = make_windows(raw.n_days, spans["val"], window_len, MANY_TO_ONE)
    test = make_windows(raw.n_days, spans["test"], window_len, MANY_TO_ONE)
    return Dataset(raw, panel, stats, partition, split, train, val, test)
