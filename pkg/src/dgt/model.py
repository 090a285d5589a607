"""Differential Graph Transformer and GRU baseline on top of :mod:`dgt.autodiff`.

Array layout
------------
prices     ``(B, N, L)`` windows of z-scored prices (B windows, N stocks, L days)
temporal   ``(B, N, L, d)`` per-stock sequences; heads ``(B, N, H, L, d/H)``
graph      ``(L, B, N, d)`` per-day cross-sections; heads ``(L, B, H, N, d/H)``
graphs     ``(H, N, N)`` shared by every window, or ``(B, H, N, N)``

Many-to-many output is ``(B, N, L)`` (step ``t`` predicts day ``t + 1``);
many-to-one output is the last step, ``(B, N)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .ingest import MANY_TO_MANY, MANY_TO_ONE

LAMBDA_INIT = 0.2
EMBED_STD = 0.02
LAMBDA_STD = 0.1


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "dgt"  # "dgt" or "gru"
    n_stocks: int = 1
    window_len: int = 64
    d: int = 32
    heads: int = 4
    layers: int = 1
    use_spatial: bool = True
    lambda_init: float = LAMBDA_INIT

    def __post_init__(self):
        if self.arch not in ("dgt", "gru"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.arch == "dgt" and self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if min(self.n_stocks, self.window_len, self.d, self.heads, self.layers) < 1:
            raise ValueError(f"all model dimensions must be positive: {self}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Params:
    """Named float64 tensors for one model; insertion order is the canonical order."""

    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def copy(self) -> "Params":
        return Params(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def bind(self, tape: Tape, trainable: bool = True) -> dict[str, Node]:
        make = tape.leaf if trainable else tape.constant
        return {k: make(v, name=k) for k, v in self.tensors.items()}

    @property
    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())


# DgtParams / GruParams are the same container tagged by config.arch
DgtParams = Params
GruParams = Params


def _glorot(rng, fan_in, fan_out, shape):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _ffn_params(t, rng, prefix, d_in, d_hidden, d_out):
    t[f"{prefix}.w1"] = _glorot(rng, d_in, d_hidden, (d_in, d_hidden))
    t[f"{prefix}.b1"] = np.zeros(d_hidden)
    t[f"{prefix}.w2"] = _glorot(rng, d_hidden, d_out, (d_hidden, d_out))
    t[f"{prefix}.b2"] = np.zeros(d_out)


def init_dgt(config: ModelConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    d, H, dh = config.d, config.heads, config.head_dim
    t: dict[str, np.ndarray] = {}
    _ffn_params(t, rng, "input", 1, d, d)
    t["stock_embed"] = rng.normal(0.0, EMBED_STD, size=(config.n_stocks, d))
    t["time_embed"] = rng.normal(0.0, EMBED_STD, size=(config.window_len, d))
    for layer in range(config.layers):
        p = f"temporal.{layer}"
        for name in ("wq", "wk", "wv"):
            t[f"{p}.{name}"] = _glorot(rng, d, dh, (H, d, dh))
        t[f"{p}.wo"] = _glorot(rng, d, d, (d, d))
        t[f"{p}.ln_gain"] = np.ones(d)
        t[f"{p}.ln_bias"] = np.zeros(d)
        _ffn_params(t, rng, f"{p}.ffn", d, 4 * d, d)
    if config.use_spatial:
        for layer in range(config.layers):
            p = f"graph.{layer}"
            t[f"{p}.wq"] = _glorot(rng, d, 2 * dh, (H, d, 2 * dh))
            t[f"{p}.wk"] = _glorot(rng, d, 2 * dh, (H, d, 2 * dh))
            t[f"{p}.wv"] = _glorot(rng, d, dh, (H, d, dh))
            t[f"{p}.wo"] = _glorot(rng, d, d, (d, d))
            # tied pairs cancel exactly, so lambda starts at lambda_init while its
            # gradient is nonzero (all-zero vectors would be a stationary point)
            t[f"{p}.lambda_q1"] = rng.normal(0.0, LAMBDA_STD, size=(H, dh))
            t[f"{p}.lambda_k1"] = rng.normal(0.0, LAMBDA_STD, size=(H, dh))
            t[f"{p}.lambda_q2"] = t[f"{p}.lambda_q1"].copy()
            t[f"{p}.lambda_k2"] = t[f"{p}.lambda_k1"].copy()
            t[f"{p}.rms_gain"] = np.ones(d)
            _ffn_params(t, rng, f"{p}.ffn", d, 4 * d, d)
    t["head.w"] = _glorot(rng, d, 1, (d, 1))
    t["head.b"] = np.zeros(1)
    return Params(config, t)


def init_gru(config: ModelConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    d = config.d
    t: dict[str, np.ndarray] = {}
    for gate in ("z", "r", "h"):
        t[f"gru.w_{gate}"] = _glorot(rng, 1 + d, d, (1 + d, d))
        t[f"gru.b_{gate}"] = np.zeros(d)
    t["head.w"] = _glorot(rng, d, 1, (d, 1))
    t["head.b"] = np.zeros(1)
    return Params(config, t)


def init_params(config: ModelConfig, seed: int = 0) -> Params:
    return init_dgt(config, seed) if config.arch == "dgt" else init_gru(config, seed)


# ----------------------------------------------------------------------------
# building blocks


def causal_mask(length: int) -> np.ndarray:
    """0 where key position j <= query position i, -inf above the diagonal."""
    if length < 1:
        raise ValueError("mask length must be >= 1")
    m = np.zeros((length, length))
    m[np.triu_indices(length, 1)] = -np.inf
    return m


def ffn(x: Node, p: dict[str, Node], prefix: str) -> Node:
    hidden = ad.relu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return hidden @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def input_projection(prices: Node, p: dict[str, Node], config: ModelConfig) -> Node:
    """Price FFN plus stock and time embeddings, ``(B, N, L) -> (B, N, L, d)``."""
    b, n, length = prices.shape
    if n != p["stock_embed"].shape[0] or length != p["time_embed"].shape[0]:
        raise ad.ShapeError(
            f"window ({n} stocks, {length} days) does not match embeddings "
            f"({p['stock_embed'].shape[0]} stocks, {p['time_embed'].shape[0]} days)"
        )
    x = ffn(ad.reshape(prices, (b, n, length, 1)), p, "input")
    stock = ad.embedding(p["stock_embed"], np.arange(n))
    time = ad.embedding(p["time_embed"], np.arange(length))
    return x + ad.reshape(stock, (n, 1, config.d)) + time


def _merge_heads(heads: Node) -> Node:
    """``(..., H, S, dh) -> (..., S, H * dh)``, i.e. concatenation of head outputs."""
    lead = heads.shape[:-3]
    h, s, dh = heads.shape[-3:]
    k = len(lead)
    axes = tuple(range(k)) + (k + 1, k, k + 2)
    return ad.reshape(ad.transpose(heads, axes), lead + (s, h * dh))


def _split_heads(x: Node) -> Node:
    """``(..., S, d) -> (..., 1, S, d)`` so per-head weights ``(H, d, k)`` broadcast."""
    return ad.reshape(x, x.shape[:-2] + (1,) + x.shape[-2:])


def temporal_attention(x: Node, p: dict[str, Node], config: ModelConfig, layer: int = 0) -> Node:
    """Causal multi-head self-attention over time for every stock, with its residual block.

    Returns ``FFN(LayerNorm(A + X)) + A`` where ``A`` is the projected attention output.
    """
    pre = f"temporal.{layer}"
    length = x.shape[-2]
    xs = _split_heads(x)
    q = xs @ p[f"{pre}.wq"]
    k = xs @ p[f"{pre}.wk"]
    v = xs @ p[f"{pre}.wv"]
    scores = ad.scale(q @ ad.transpose(k), 1.0 / math.sqrt(config.head_dim))
    weights = ad.row_softmax(ad.masked_add(scores, causal_mask(length)))
    attn = _merge_heads(weights @ v) @ p[f"{pre}.wo"]
    normed = ad.layer_norm(attn + x, p[f"{pre}.ln_gain"], p[f"{pre}.ln_bias"])
    return ffn(normed, p, f"{pre}.ffn") + attn


def lambda_value(p: dict[str, Node], config: ModelConfig, layer: int = 0) -> Node:
    """Per-head balance ``exp(q1.k1) - exp(q2.k2) + lambda_init``, shape ``(H,)``."""
    pre = f"graph.{layer}"
    first = ad.exp(ad.sum_(p[f"{pre}.lambda_q1"] * p[f"{pre}.lambda_k1"], axis=-1))
    second = ad.exp(ad.sum_(p[f"{pre}.lambda_q2"] * p[f"{pre}.lambda_k2"], axis=-1))
    return first - second + config.lambda_init


def graph_attention_heads(x: Node, adjacency, p: dict[str, Node], config: ModelConfig, layer: int = 0):
    """Differential graph attention heads over the stock axis.

    ``x`` is ``(..., N, d)``; returns ``(heads (..., H, N, dh), lambda (H,))``.
    """
    pre = f"graph.{layer}"
    dh = config.head_dim
    if adjacency.shape[-3] != config.heads:
        raise ValueError(f"graph set provides {adjacency.shape[-3]} heads, model has {config.heads}")
    xs = _split_heads(x)
    q = xs @ p[f"{pre}.wq"]
    k = xs @ p[f"{pre}.wk"]
    v = xs @ p[f"{pre}.wv"]
    inv = 1.0 / math.sqrt(dh)
    first = ad.row_softmax(ad.scale(q[..., :dh] @ ad.transpose(k[..., :dh]), inv))
    second = ad.row_softmax(ad.scale(q[..., dh:] @ ad.transpose(k[..., dh:]), inv))
    lam = lambda_value(p, config, layer)
    a = adjacency if isinstance(adjacency, Node) else x.tape.constant(adjacency)
    mixed = first * a - ad.reshape(lam, (config.heads, 1, 1)) * second
    return mixed @ v, lam


def diff_graph_attention(x: Node, adjacency, p: dict[str, Node], config: ModelConfig, layer: int = 0) -> Node:
    """Graph attention across stocks within each day, with its RMSNorm residual block.

    Returns ``FFN(RMSNorm(A + X)) + A`` where ``A`` is the projected head output.
    """
    pre = f"graph.{layer}"
    heads, _ = graph_attention_heads(x, adjacency, p, config, layer)
    attn = _merge_heads(heads) @ p[f"{pre}.wo"]
    normed = ad.rms_norm(attn + x, p[f"{pre}.rms_gain"])
    return ffn(normed, p, f"{pre}.ffn") + attn


def additive_prior_attention(x: Node, delta, wq: Node, wk: Node, wv: Node, lam: Node) -> Node:
    """Single-map attention with a scaled differential-graph logit bias.

    ``softmax(Q K^T / sqrt(d_k) + lam * delta) V`` over the rows of ``x`` (..., N, d).
    Diagnostic variant; the default model does not use it.
    """
    delta = np.asarray(getattr(delta, "values", delta), dtype=np.float64)
    n = x.shape[-2]
    if delta.shape != (n, n):
        raise ad.ShapeError(f"delta matrix {delta.shape} does not match {n} rows")
    q, k, v = x @ wq, x @ wk, x @ wv
    scores = ad.scale(q @ ad.transpose(k), 1.0 / math.sqrt(k.shape[-1]))
    bias = ad.reshape(lam, (1, 1)) * x.tape.constant(delta)
    return ad.row_softmax(scores + bias) @ v


def _output(x: Node, p: dict[str, Node]) -> Node:
    out = x @ p["head.w"] + p["head.b"]
    return ad.reshape(out, out.shape[:-1])


# ----------------------------------------------------------------------------
# forward passes


def _check_mode(mode):
    if mode not in (MANY_TO_MANY, MANY_TO_ONE):
        raise ValueError(f"unknown prediction mode {mode!r}")


def dgt_forward(prices: Node, adjacency, p: dict[str, Node], config: ModelConfig, mode: str = MANY_TO_MANY) -> Node:
    """Temporal stage, graph stage, prediction head.

    Many-to-one runs the identical many-to-many computation and keeps the last
    step, so the two modes agree bit for bit.
    """
    _check_mode(mode)
    x = input_projection(prices, p, config)
    for layer in range(config.layers):
        x = temporal_attention(x, p, config, layer) + x
    if config.use_spatial:
        if adjacency is None:
            raise ValueError("use_spatial model needs an adjacency stack")
        x = ad.transpose(x, (2, 0, 1, 3))  # (L, B, N, d)
        for layer in range(config.layers):
            x = diff_graph_attention(x, adjacency, p, config, layer) + x
        out = ad.transpose(_output(x, p), (1, 2, 0))  # (B, N, L)
    else:
        out = _output(x, p)
    if mode == MANY_TO_ONE:
        return out[..., -1]
    return out


def gru_forward(prices: Node, p: dict[str, Node], config: ModelConfig, mode: str = MANY_TO_MANY) -> Node:
    """Per-stock GRU over the window with ``h_0 = 0``."""
    _check_mode(mode)
    b, n, length = prices.shape
    tape = prices.tape
    h = tape.constant(np.zeros((b, n, config.d)))
    outputs = []
    for t in range(length):
        x_t = ad.reshape(prices[:, :, t], (b, n, 1))
        xh = ad.concat([x_t, h])
        z = ad.sigmoid(xh @ p["gru.w_z"] + p["gru.b_z"])
        r = ad.sigmoid(xh @ p["gru.w_r"] + p["gru.b_r"])
        cand = ad.tanh(ad.concat([x_t, r * h]) @ p["gru.w_h"] + p["gru.b_h"])
        h = (1.0 - z) * h + z * cand
        outputs.append(h)
    hs = ad.reshape(ad.concat(outputs), (b, n, length, config.d))
    out = _output(hs, p)
    if mode == MANY_TO_ONE:
        return out[..., -1]
    return out


def forward(prices: Node, adjacency, p: dict[str, Node], config: ModelConfig, mode: str = MANY_TO_MANY) -> Node:
    if config.arch == "gru":
        return gru_forward(prices, p, config, mode)
    return dgt_forward(prices, adjacency, p, config, mode)


def predict(params: Params, prices: np.ndarray, adjacency=None, mode: str = MANY_TO_ONE) -> np.ndarray:
    """Evaluate the model on a ``(B, N, L)`` batch without recording gradients."""
    prices = np.asarray(prices, dtype=np.float64)
    if prices.ndim == 2:
        return predict(params, prices[None], adjacency, mode)[0]
    tape = Tape()
    p = params.bind(tape, trainable=False)
    return forward(tape.constant(prices), adjacency, p, params.config, mode).value
