"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

The engine is eager: every operation computes its value immediately and
appends a :class:`Node` to a linear :class:`Tape`.  ``Tape.backward`` walks
the tape in reverse and accumulates adjoints into each node's ``grad``.

Elementwise binary ops and ``matmul`` follow numpy broadcasting; the adjoint
of a broadcast operand is summed back to the operand's shape.

Example
-------
>>> tape = Tape()
>>> w = tape.leaf(np.array([1.0, 2.0]))
>>> loss = sum_(w * w)
>>> tape.backward(loss)
>>> w.grad
array([2., 4.])
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-8


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Node:
    """One recorded value on a tape."""

    __slots__ = ("tape", "value", "op_kind", "parents", "attrs", "grad", "requires_grad", "name", "index")

    def __init__(self, tape, value, op_kind, parents=(), attrs=None, requires_grad=True, name=None):
        self.tape = tape
        self.value = value
        self.op_kind = op_kind
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op_kind}{label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _as_node(self.tape, other))

    def __radd__(self, other):
        return add(_as_node(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _as_node(self.tape, other))

    def __rsub__(self, other):
        return sub(_as_node(self.tape, other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_node(self.tape, other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_node(self.tape, other))

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def _as_node(tape, x):
    if isinstance(x, Node):
        return x
    return tape.constant(np.asarray(x, dtype=np.float64))


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op_kind, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op_kind}: incompatible shapes {', '.join(map(str, shapes))}") from None


@dataclass(frozen=True)
class Op:
    """Forward rule plus vector-Jacobian product.

    ``vjp(g, out, *inputs, **attrs)`` returns one adjoint per input (or None
    for inputs that never carry gradient).
    """

    forward: Callable
    vjp: Callable
    check: Callable | None = None
    allow_neg_inf: bool = False


OPS: dict[str, Op] = {}


def register(name, forward, vjp, check=None, allow_neg_inf=False):
    OPS[name] = Op(forward, vjp, check, allow_neg_inf)


# ----------------------------------------------------------------------------
# op definitions


def _check_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])


def _matmul_vjp(g, out, a, b):
    ga = unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    gb = unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return ga, gb


register("matmul", lambda a, b: a @ b, _matmul_vjp, _check_matmul)


def _transpose_fwd(a, axes=None):
    if axes is None:
        return np.swapaxes(a, -1, -2)
    return np.transpose(a, axes)


def _transpose_vjp(g, out, a, axes=None):
    if axes is None:
        return (np.swapaxes(g, -1, -2),)
    return (np.transpose(g, np.argsort(axes)),)


def _check_transpose(a, axes=None):
    if axes is None and a.ndim < 2:
        raise ShapeError(f"transpose: need ndim >= 2, got {a.shape}")
    if axes is not None and sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")


register("transpose", _transpose_fwd, _transpose_vjp, _check_transpose)


def _reshape_vjp(g, out, a, shape):
    return (g.reshape(a.shape),)


def _check_reshape(a, shape):
    if int(np.prod(shape)) != a.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")


register("reshape", lambda a, shape: a.reshape(shape), _reshape_vjp, _check_reshape)


def _check_elementwise(op_kind):
    return lambda a, b: _broadcast_shape(op_kind, a.shape, b.shape)


register(
    "add",
    lambda a, b: a + b,
    lambda g, out, a, b: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    _check_elementwise("add"),
)
register(
    "subtract",
    lambda a, b: a - b,
    lambda g, out, a, b: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    _check_elementwise("subtract"),
)
register(
    "hadamard",
    lambda a, b: a * b,
    lambda g, out, a, b: (unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)),
    _check_elementwise("hadamard"),
)
register("scale", lambda a, c: a * c, lambda g, out, a, c: (g * c,))


def _masked_add_check(a, mask):
    _broadcast_shape("masked_add", a.shape, mask.shape)
    if np.broadcast_shapes(a.shape, mask.shape) != a.shape:
        raise ShapeError(f"masked_add: mask {mask.shape} must broadcast to {a.shape}")


# the mask is a constant attribute, so only ``a`` receives an adjoint
register("masked_add", lambda a, mask: a + mask, lambda g, out, a, mask: (g,), _masked_add_check, allow_neg_inf=True)


def _softmax_fwd(a):
    top = a.max(axis=-1, keepdims=True)
    if np.isneginf(top).any():
        raise ValueError("row_softmax: fully masked row (every entry is -inf)")
    e = np.exp(a - top)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_vjp(g, out, a):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


register("row_softmax", _softmax_fwd, _softmax_vjp)


def _layer_norm_parts(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + NORM_EPS)
    return xc * inv, inv


def _layer_norm_fwd(x, gain, bias):
    xhat, _ = _layer_norm_parts(x)
    return xhat * gain + bias


def _layer_norm_vjp(g, out, x, gain, bias):
    xhat, inv = _layer_norm_parts(x)
    gx = g * gain
    gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    return gx, unbroadcast(g * xhat, gain.shape), unbroadcast(g, bias.shape)


def _check_norm(name, min_width):
    def check(x, gain, *rest):
        if x.shape[-1] < min_width:
            raise ShapeError(f"{name}: last axis must be >= {min_width}, got {x.shape}")
        for p in (gain, *rest):
            if p.shape != (x.shape[-1],):
                raise ShapeError(f"{name}: parameter shape {p.shape} != ({x.shape[-1]},)")

    return check


register("layer_norm", _layer_norm_fwd, _layer_norm_vjp, _check_norm("layer_norm", 2))


def _rms_fwd(x, gain):
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + NORM_EPS)
    return x * inv * gain


def _rms_vjp(g, out, x, gain):
    n = x.shape[-1]
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + NORM_EPS)
    gx = g * gain
    dx = gx * inv - x * (gx * x).sum(axis=-1, keepdims=True) * inv**3 / n
    return dx, unbroadcast(g * x * inv, gain.shape)


register("rms_norm", _rms_fwd, _rms_vjp, _check_norm("rms_norm", 1))

register("relu", lambda a: np.maximum(a, 0.0), lambda g, out, a: (g * (a > 0),))
register("tanh", np.tanh, lambda g, out, a: (g * (1.0 - out * out),))


def _sigmoid(a):
    # split by sign so neither branch overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


register("sigmoid", _sigmoid, lambda g, out, a: (g * out * (1.0 - out),))
register("exp", np.exp, lambda g, out, a: (g * out,))


def _concat_vjp(g, out, *parts):
    bounds = np.cumsum([p.shape[-1] for p in parts])[:-1]
    return tuple(np.split(g, bounds, axis=-1))


def _check_concat(*parts):
    lead = {p.shape[:-1] for p in parts}
    if len(lead) != 1:
        raise ShapeError(f"concat: leading shapes differ: {[p.shape for p in parts]}")


register("concat", lambda *parts: np.concatenate(parts, axis=-1), _concat_vjp, _check_concat)


def _slice_vjp(g, out, a, index):
    ga = np.zeros_like(a)
    ga[index] = g
    return (ga,)


register("slice", lambda a, index: a[index].copy(), _slice_vjp)


def _embed_vjp(g, out, table, indices):
    gt = np.zeros_like(table)
    np.add.at(gt, indices, g)
    return (gt,)


def _check_embed(table, indices):
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table with {table.shape[0]} rows")


register("embedding", lambda table, indices: table[indices], _embed_vjp, _check_embed)


def _sum_fwd(a, axis=None, keepdims=False):
    return np.asarray(a.sum(axis=axis, keepdims=keepdims), dtype=np.float64)


def _sum_vjp(g, out, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


register("sum", _sum_fwd, _sum_vjp)


def _mse_check(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} and target {target.shape} differ")


def _mse_vjp(g, out, pred, target):
    d = 2.0 * g * (pred - target)
    return d, -d


register("mse", lambda pred, target: np.asarray(((pred - target) ** 2).sum()), _mse_vjp, _mse_check)


# ----------------------------------------------------------------------------
# tape


class Tape:
    """Linear record of eagerly evaluated nodes."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite
        self._backward_done = False

    def _append(self, node):
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def leaf(self, value, name=None) -> Node:
        value = np.array(value, dtype=np.float64)
        return self._append(Node(self, value, "leaf", name=name))

    def constant(self, value, name=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        return self._append(Node(self, value, "const", requires_grad=False, name=name))

    def record(self, op_kind: str, inputs: Sequence[Node], **attrs) -> Node:
        op = OPS.get(op_kind)
        if op is None:
            raise KeyError(f"unknown op_kind {op_kind!r}")
        for node in inputs:
            if node.tape is not self:
                raise ValueError(f"{op_kind}: input {node!r} belongs to another tape")
        values = [n.value for n in inputs]
        if op.check is not None:
            op.check(*values, **attrs)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            # non-finite results are reported below with the op name attached
            out = op.forward(*values, **attrs)
        if self.check_finite:
            bad = np.isnan(out) | np.isposinf(out) if op.allow_neg_inf else ~np.isfinite(out)
            if bad.any():
                raise NonFiniteError(
                    f"{op_kind}: non-finite output ({int(bad.sum())} of {out.size} entries), "
                    f"input shapes {[v.shape for v in values]}"
                )
        requires = any(n.requires_grad for n in inputs)
        return self._append(Node(self, out, op_kind, inputs, attrs, requires_grad=requires))

    def backward(self, loss: Node) -> None:
        if loss.tape is not self:
            raise ValueError("loss belongs to another tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if self._backward_done:
            raise RuntimeError("backward already ran on this tape; record a fresh tape")
        self._backward_done = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            if node.grad is None or not node.parents:
                continue
            op = OPS[node.op_kind]
            grads = op.vjp(node.grad, node.value, *(p.value for p in node.parents), **node.attrs)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64)
                else:
                    parent.grad = parent.grad + g
        for node in self.nodes:
            if node.op_kind == "leaf" and node.grad is None:
                node.grad = np.zeros_like(node.value)

    def dump(self) -> str:
        """Human-readable listing of the tape, one node per line."""
        lines = []
        for node in self.nodes:
            parents = ",".join(str(p.index) for p in node.parents)
            label = f" [{node.name}]" if node.name else ""
            lines.append(f"%{node.index} = {node.op_kind}({parents}){label} shape={node.shape}")
        return "\n".join(lines)


# ----------------------------------------------------------------------------
# functional wrappers


def matmul(a, b):
    return a.tape.record("matmul", [a, b])


def transpose(a, axes=None):
    return a.tape.record("transpose", [a], axes=None if axes is None else tuple(axes))


def reshape(a, shape):
    return a.tape.record("reshape", [a], shape=tuple(shape))


def add(a, b):
    return a.tape.record("add", [a, b])


def sub(a, b):
    return a.tape.record("subtract", [a, b])


def mul(a, b):
    return a.tape.record("hadamard", [a, b])


def scale(a, c: float):
    return a.tape.record("scale", [a], c=float(c))


def masked_add(a, mask):
    return a.tape.record("masked_add", [a], mask=np.asarray(mask, dtype=np.float64))


def row_softmax(a):
    return a.tape.record("row_softmax", [a])


def layer_norm(x, gain, bias):
    return x.tape.record("layer_norm", [x, gain, bias])


def rms_norm(x, gain):
    return x.tape.record("rms_norm", [x, gain])


def relu(a):
    return a.tape.record("relu", [a])


def tanh(a):
    return a.tape.record("tanh", [a])


def sigmoid(a):
    return a.tape.record("sigmoid", [a])


def exp(a):
    return a.tape.record("exp", [a])


def concat(parts):
    parts = list(parts)
    return parts[0].tape.record("concat", parts)


def slice_(a, index):
    return a.tape.record("slice", [a], index=index)


def embedding(table, indices):
    return table.tape.record("embedding", [table], indices=np.asarray(indices, dtype=np.intp))


def sum_(a, axis=None, keepdims=False):
    return a.tape.record("sum", [a], axis=axis, keepdims=keepdims)


def mse(pred, target):
    """Sum of squared errors (no averaging)."""
    return pred.tape.record("mse", [pred, target])


# ----------------------------------------------------------------------------
# finite-difference check


def grad_check(f: Callable[..., Node], params: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``f`` receives one leaf node per entry of ``params`` (all on a fresh tape)
    and must return a scalar node.  The relative error for each coordinate is
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    params = [np.array(p, dtype=np.float64) for p in params]

    def evaluate(values):
        tape = Tape()
        leaves = [tape.leaf(v) for v in values]
        return tape, leaves, f(*leaves)

    tape, leaves, loss = evaluate(params)
    tape.backward(loss)
    analytic = [leaf.grad for leaf in leaves]

    worst = 0.0
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(evaluate(params)[2].value)
            flat[i] = orig - eps
            down = float(evaluate(params)[2].value)
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            ad = float(analytic[k].reshape(-1)[i])
            err = abs(ad - fd) / max(1e-8, abs(ad) + abs(fd))
            worst = max(worst, err)
    return worst
