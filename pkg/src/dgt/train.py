"""Teacher-forcing training, Adam, learning-rate grid search and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape
from .corr import GraphSet, ones_graph
from .ingest import Dataset, NormStats, Window, WindowSet, window_arrays
from .model import ModelConfig, Params, forward, init_params, predict

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DGTC"
CKPT_VERSION = 1
EVAL_BATCH = 64


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "dgt"
    use_spatial: bool = True
    metric: str = "none"
    scope: str = "none"
    lr_grid: tuple[float, ...] = (0.01, 0.1)
    epochs: int = 100
    eval_every: int = 10
    seed: int = 7
    d: int = 32
    heads: int = 4
    window_len: int = 64
    layers: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "lr_grid", tuple(float(x) for x in self.lr_grid))
        if not self.lr_grid:
            raise ValueError("lr_grid must not be empty")
        if not self.epochs >= self.eval_every >= 1:
            raise ValueError(f"need epochs >= eval_every >= 1, got {self.epochs} and {self.eval_every}")
        if self.arch == "gru" and self.use_spatial:
            raise ValueError("the GRU baseline has no spatial component")
        if not self.use_spatial and (self.metric != "none" or self.scope != "none"):
            raise ValueError("metric and scope require use_spatial")
        if (self.metric == "none") != (self.scope == "none"):
            raise ValueError("metric and scope must both be set or both be 'none'")

    def model_config(self, n_stocks: int) -> ModelConfig:
        return ModelConfig(self.arch, n_stocks, self.window_len, self.d, self.heads, self.layers,
                           self.use_spatial if self.arch == "dgt" else False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_grid"] = list(self.lr_grid)
        return d


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Params) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.tensors.items()},
                   {k: np.zeros_like(a) for k, a in params.tensors.items()})


def mse_loss(pred, target) -> float:
    """Sum of squared errors over every stock and step."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    return float(((pred - target) ** 2).sum())


def adam_step(params: Params, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name} at Adam step {state.step + 1}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.tensors[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class Checkpoint:
    params: Params
    train_config: TrainConfig
    stats: NormStats
    lr: float
    best_val_rmse: float
    best_epoch: int
    seed: int
    history: list[dict] = field(default_factory=list)

    @property
    def arch(self) -> str:
        return self.params.config.arch

    @property
    def model_config(self) -> ModelConfig:
        return self.params.config


# ----------------------------------------------------------------------------
# graphs per window


def resolve_graphs(config: TrainConfig, graphs: GraphSet | None, n_stocks: int) -> GraphSet | None:
    if config.arch == "gru" or not config.use_spatial:
        return None
    if config.metric == "none":
        return ones_graph(n_stocks, config.heads)
    if graphs is None:
        raise ValueError(f"{config.metric}/{config.scope} run needs a graph set")
    if graphs.metric != config.metric or graphs.scope != config.scope or graphs.heads != config.heads:
        raise ValueError(
            f"graph set is {graphs.metric}/{graphs.scope} with {graphs.heads} heads, "
            f"config wants {config.metric}/{config.scope} with {config.heads}"
        )
    return graphs


def predict_windows(params: Params, panel, windows: Sequence[Window], graphs: GraphSet | None,
                    batch: int = EVAL_BATCH) -> np.ndarray:
    """Many-to-one predictions, ``(len(windows), N)``."""
    windows = list(windows)
    out = []
    for i in range(0, len(windows), batch):
        chunk = windows[i:i + batch]
        x, _ = window_arrays(panel, chunk)
        adj = graphs.batch([w.key for w in chunk]) if graphs is not None else None
        out.append(predict(params, x, adj))
    return np.concatenate(out, axis=0)


def _val_metrics(params, data: Dataset, graphs):
    pred = predict_windows(params, data.panel, data.val, graphs)
    _, y = window_arrays(data.panel, data.val)
    err = pred - y[..., 0]
    return math.sqrt(float(np.mean(err * err))), float(np.mean(np.abs(err)))


def window_loss(params: Params, panel, window: Window, graphs: GraphSet | None, tape: Tape):
    """Many-to-many squared-error loss for one window on ``tape``; returns (loss, bound params)."""
    x, y = window_arrays(panel, [window])
    adj = graphs.adjacency(window.key) if graphs is not None else None
    p = params.bind(tape)
    pred = forward(tape.constant(x), adj, p, params.config)
    n_targets = y.shape[-1]
    if n_targets < pred.shape[-1]:
        pred = pred[..., :n_targets]
    return ad.mse(pred, tape.constant(y)), p


# ----------------------------------------------------------------------------
# training


def train_model(config: TrainConfig, data: Dataset, graphs: GraphSet | None = None, lr: float | None = None,
                params: Params | None = None) -> Checkpoint:
    """Train one model at one learning rate and keep the best-validation parameters.

    Each training window contributes one Adam update per epoch, visited in
    chronological order.  Validation RMSE (many-to-one) is measured every
    ``eval_every`` epochs.
    """
    lr = config.lr_grid[0] if lr is None else float(lr)
    if len(data.train) == 0 or len(data.val) == 0:
        raise ValueError("training and validation splits must both contain windows")
    graphs = resolve_graphs(config, graphs, data.panel.n_stocks)
    if params is None:
        params = init_params(config.model_config(data.panel.n_stocks), config.seed)
    state = AdamState.zeros(params)
    best = (math.inf, 0, None)
    history = []
    for epoch in range(1, config.epochs + 1):
        epoch_loss = 0.0
        try:
            for window in data.train:
                tape = Tape()
                loss, p = window_loss(params, data.panel, window, graphs, tape)
                tape.backward(loss)
                adam_step(params, {k: n.grad for k, n in p.items()}, state, lr,
                          config.beta1, config.beta2, config.adam_eps)
                epoch_loss += float(loss.value)
        except NonFiniteError as exc:
            raise TrainingDiverged(epoch, str(exc)) from None
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(epoch, "non-finite epoch loss")
        row = {"epoch": epoch, "train_loss": epoch_loss, "val_rmse": None, "val_mae": None}
        if epoch % config.eval_every == 0:
            try:
                val_rmse, val_mae = _val_metrics(params, data, graphs)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, str(exc)) from None
            row.update(val_rmse=val_rmse, val_mae=val_mae)
            if val_rmse < best[0]:
                best = (val_rmse, epoch, params.copy())
            log.debug("epoch %d loss %.6g val_rmse %.6g", epoch, epoch_loss, val_rmse)
        history.append(row)
    return Checkpoint(best[2], config, data.stats, lr, best[0], best[1], config.seed, history)


@dataclass
class GridResult:
    lr: float
    status: str
    val_rmse: float | None = None
    val_mae: float | None = None
    best_epoch: int | None = None
    failed_epoch: int | None = None


def grid_search(config: TrainConfig, data: Dataset, graphs: GraphSet | None = None):
    """Train once per learning rate; return ``(best_lr, checkpoint, report)``.

    The minimum validation RMSE wins; ties go to the smaller learning rate.
    """
    report: list[GridResult] = []
    best: tuple[float, float, Checkpoint] | None = None
    for lr in sorted(config.lr_grid):
        try:
            ckpt = train_model(config, data, graphs, lr)
        except TrainingDiverged as exc:
            log.warning("lr %g: %s", lr, exc)
            report.append(GridResult(lr, "diverged", failed_epoch=exc.epoch))
            continue
        val_mae = next(h["val_mae"] for h in ckpt.history if h["epoch"] == ckpt.best_epoch)
        report.append(GridResult(lr, "ok", ckpt.best_val_rmse, val_mae, ckpt.best_epoch))
        if best is None or ckpt.best_val_rmse < best[0]:
            best = (ckpt.best_val_rmse, lr, ckpt)
    if best is None:
        raise TrainingDiverged(report[-1].failed_epoch or 0, "every learning rate in the grid diverged")
    return best[1], best[2], report


# ----------------------------------------------------------------------------
# persistence


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "model": ckpt.params.config.to_dict(),
        "train": ckpt.train_config.to_dict(),
        "lr": ckpt.lr,
        "best_val_rmse": ckpt.best_val_rmse,
        "best_epoch": ckpt.best_epoch,
        "seed": ckpt.seed,
        "history": ckpt.history,
        "norm": {"tickers": list(ckpt.stats.tickers), "span": list(ckpt.stats.span)},
    }
    tensors = dict(ckpt.params.tensors)
    tensors["norm.mean"] = ckpt.stats.mean
    tensors["norm.std"] = ckpt.stats.std
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<H", CKPT_VERSION)
    out += _pack_str(json.dumps(meta, sort_keys=True))
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out += _pack_str(name)
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += hashlib.sha256(bytes(out)).digest()
    return bytes(out)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path, expect_arch: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a DGTC checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if len(raw) < 38 or hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupted)")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    (n,) = struct.unpack_from("<I", body, pos)
    meta = json.loads(body[pos + 4:pos + 4 + n].decode("utf-8"))
    pos += 4 + n
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, pos)
        name = body[pos + 4:pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (ndim,) = struct.unpack_from("<B", body, pos)
        shape = struct.unpack_from(f"<{ndim}I", body, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape))
        tensors[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    model_cfg = ModelConfig(**meta["model"])
    if expect_arch is not None and model_cfg.arch != expect_arch:
        raise CheckpointError(f"{path}: checkpoint holds a {model_cfg.arch} model, expected {expect_arch}")
    train_cfg = TrainConfig(**{**meta["train"], "lr_grid": tuple(meta["train"]["lr_grid"])})
    stats = NormStats(tuple(meta["norm"]["tickers"]), tensors.pop("norm.mean"), tensors.pop("norm.std"),
                      tuple(meta["norm"]["span"]))
    return Checkpoint(Params(model_cfg, tensors), train_cfg, stats, meta["lr"], meta["best_val_rmse"],
                      meta["best_epoch"], meta["seed"], meta["history"])
