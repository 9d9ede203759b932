"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to its nodes in creation
order, so the node list is topologically sorted by construction and the
backward pass is a single reverse sweep.

Nodes created without a tape (``tape=None``) carry values only; operations
on them run the forward computation and record nothing. Inference code uses
this to share the model code path with training at no bookkeeping cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Callable, Sequence

import numba
import numpy as np
from scipy.special import erf

__all__ = [
    "Node",
    "Tape",
    "ShapeError",
    "OPS",
    "forward",
    "backward",
    "constant",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation."""


class Node:
    """One value in a computation, optionally recorded on a tape."""

    __slots__ = ("id", "value", "op", "inputs", "attrs", "tape")

    def __init__(self, value, tape=None, op="leaf", inputs=(), attrs=None):
        self.value = value
        self.tape = tape
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.id = -1

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"

    # Operator sugar so model code reads like array code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class Tape:
    """Ordered record of operations plus the gradients of the last backward."""

    nodes: list = field(default_factory=list)
    gradients: dict = field(default_factory=dict)
    visits: int = 0

    def leaf(self, value, name=None) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), self, "leaf", (), {"name": name})
        return self._push(node)

    def _push(self, node):
        node.id = len(self.nodes)
        self.nodes.append(node)
        return node

    def __len__(self):
        return len(self.nodes)

    def grad(self, node: Node):
        """Gradient of the last backward target w.r.t. ``node``."""
        g = self.gradients.get(node.id)
        return np.zeros_like(node.value) if g is None else g

    def backward(self, loss: Node) -> dict:
        return backward(self, loss)

    def clear(self):
        """Drop recorded nodes and gradients.

        Nodes point back at their tape, so a finished tape is a reference
        cycle holding every intermediate array until the cyclic collector
        happens to run. Training loops call this once gradients are read.
        """
        for node in self.nodes:
            node.tape = None
            node.inputs = ()
        self.nodes = []
        self.gradients = {}


def constant(value) -> Node:
    """Wrap an array as an untracked node."""
    return Node(np.asarray(value, dtype=np.float64))


# ---------------------------------------------------------------------------
# Op registry: forward(values, attrs) and vjp(grad, out, values, attrs)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    vjp: Callable
    check: Callable | None = None


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(name):
    def check(a, b, attrs):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None

    return check


def _check_matmul(a, b, attrs):
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand (shapes {a.shape} and {b.shape})")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ, left {a.shape} has {a.shape[-1]} columns "
            f"but right {b.shape} has {b.shape[0]} rows"
        )


def _matmul_vjp(g, out, vals, attrs):
    a, b = vals
    need_a, need_b = attrs.get("needs", (True, True))
    if b.ndim == 1:
        ga = (np.multiply.outer(g, b) if a.ndim > 1 else g * b) if need_a else None
        return ga, (a.T @ g if need_b else None)
    if a.ndim == 1:
        return (b @ g if need_a else None), (np.outer(a, g) if need_b else None)
    return (g @ b.T if need_a else None), (a.T @ g if need_b else None)


def _check_concat(*args):
    *vals, attrs = args
    axis = attrs.get("axis", -1)
    ref = vals[0].shape
    for v in vals[1:]:
        if v.ndim != len(ref):
            raise ShapeError(f"concat: rank mismatch {ref} vs {v.shape}")
        for d in range(v.ndim):
            if d != axis % v.ndim and v.shape[d] != ref[d]:
                raise ShapeError(f"concat: dimension {d} differs, {ref} vs {v.shape}")


def _concat_vjp(g, out, vals, attrs):
    axis = attrs.get("axis", -1)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


@numba.njit(cache=True)
def _gelu_kernel(x, want_grad):
    # x is 1-D; returns GELU(x) and, if requested, GELU'(x)
    out = np.empty_like(x)
    d = np.empty(x.size if want_grad else 0, dtype=x.dtype)
    for i in range(x.size):
        v = x[i]
        c = 0.5 * (1.0 + math.erf(v * 0.7071067811865476))
        out[i] = v * c
        if want_grad:
            d[i] = c + v * 0.3989422804014327 * math.exp(-0.5 * v * v)
    return out, d


def _gelu(vals, attrs):
    x = vals[0]
    out, d = _gelu_kernel(np.ascontiguousarray(x).reshape(-1), attrs.get("track", False))
    if d.size:
        attrs["dgelu"] = d.reshape(x.shape)
    return out.reshape(x.shape)


def _gelu_vjp(g, out, vals, attrs):
    d = attrs.get("dgelu")
    if d is None:
        x = vals[0]
        d = 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return (g * d,)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu_vjp(g, out, vals, attrs):
    x = vals[0]
    s = _sigmoid(x)
    return (g * (s + x * s * (1.0 - s)),)


def _reduce_vjp(kind):
    def vjp(g, out, vals, attrs):
        x = vals[0]
        axis = attrs.get("axis")
        if axis is None:
            n = x.size
            full = np.broadcast_to(g, x.shape)
        else:
            n = x.shape[axis]
            full = np.broadcast_to(np.expand_dims(g, axis), x.shape)
        if kind == "mean":
            full = full / n
        return (np.array(full),)

    return vjp


def _sinusoid(vals, attrs):
    # (n, d) -> (n, d * 2k), interleaved sin/cos per input column
    x = vals[0]
    freqs = attrs["freqs"]
    arg = x[..., None] * freqs
    out = np.empty(x.shape + (2 * freqs.size,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out.reshape(x.shape[:-1] + (-1,))


def _sinusoid_vjp(g, out, vals, attrs):
    x = vals[0]
    freqs = attrs["freqs"]
    g = g.reshape(x.shape + (2 * freqs.size,))
    arg = x[..., None] * freqs
    gx = (g[..., 0::2] * np.cos(arg) - g[..., 1::2] * np.sin(arg)) @ freqs
    return (gx,)


def _check_slice(x, attrs):
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice: columns [{start}, {stop}) out of range for shape {x.shape}")


def _slice_vjp(g, out, vals, attrs):
    gx = np.zeros_like(vals[0])
    gx[..., attrs["start"]:attrs["stop"]] = g
    return (gx,)


def _clamp_vjp(g, out, vals, attrs):
    x = vals[0]
    inside = (x >= attrs["lo"]) & (x <= attrs["hi"])
    return (g * inside,)


OPS: dict[str, OpDef] = {
    "matmul": OpDef(lambda v, a: v[0] @ v[1], _matmul_vjp, _check_matmul),
    "add": OpDef(
        lambda v, a: v[0] + v[1],
        lambda g, o, v, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
        _check_broadcast("add"),
    ),
    "sub": OpDef(
        lambda v, a: v[0] - v[1],
        lambda g, o, v, a: (_unbroadcast(g, v[0].shape), -_unbroadcast(g, v[1].shape)),
        _check_broadcast("sub"),
    ),
    "mul": OpDef(
        lambda v, a: v[0] * v[1],
        lambda g, o, v, a: (_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)),
        _check_broadcast("mul"),
    ),
    "concat": OpDef(lambda v, a: np.concatenate(v, axis=a.get("axis", -1)), _concat_vjp, _check_concat),
    "gelu": OpDef(_gelu, _gelu_vjp),
    "silu": OpDef(lambda v, a: v[0] * _sigmoid(v[0]), _silu_vjp),
    "square": OpDef(lambda v, a: v[0] * v[0], lambda g, o, v, a: (2.0 * g * v[0],)),
    "mean": OpDef(lambda v, a: np.asarray(np.mean(v[0], axis=a.get("axis"))), _reduce_vjp("mean")),
    "sum": OpDef(lambda v, a: np.asarray(np.sum(v[0], axis=a.get("axis"))), _reduce_vjp("sum")),
    "log": OpDef(lambda v, a: np.log(v[0]), lambda g, o, v, a: (g / v[0],)),
    "exp": OpDef(lambda v, a: np.exp(v[0]), lambda g, o, v, a: (g * o,)),
    "scale": OpDef(lambda v, a: a["factor"] * v[0], lambda g, o, v, a: (a["factor"] * g,)),
    "sin": OpDef(lambda v, a: np.sin(v[0]), lambda g, o, v, a: (g * np.cos(v[0]),)),
    "cos": OpDef(lambda v, a: np.cos(v[0]), lambda g, o, v, a: (-g * np.sin(v[0]),)),
    "sinusoid": OpDef(_sinusoid, _sinusoid_vjp),
    "slice": OpDef(lambda v, a: v[0][..., a["start"]:a["stop"]], _slice_vjp, _check_slice),
    "clamp": OpDef(lambda v, a: np.clip(v[0], a["lo"], a["hi"]), _clamp_vjp),
}


def forward(tape: Tape | None, op_kind: str, inputs: Sequence[Node], **attrs) -> Node:
    """Apply ``op_kind`` to ``inputs`` and record the result on ``tape``."""
    try:
        op = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    vals = [n.value for n in inputs]
    if op.check is not None:
        op.check(*vals, attrs)
    if tape is not None:
        attrs["track"] = True
        attrs["needs"] = tuple(n.tape is not None for n in inputs)
    out = Node(op.forward(vals, attrs), tape, op_kind, inputs, attrs)
    if tape is not None:
        tape._push(out)
    return out


def backward(tape: Tape, loss: Node) -> dict:
    """Populate ``tape.gradients`` with d(loss)/d(node) for every node.

    Returns the gradient map keyed by node id.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.value.shape}")
    if loss.tape is not tape:
        raise ValueError("backward: loss node does not belong to this tape")
    grads = {loss.id: np.ones_like(loss.value)}
    tape.visits = 0
    for node in reversed(tape.nodes[: loss.id + 1]):
        tape.visits += 1
        g = grads.get(node.id)
        if g is None or not node.inputs:
            continue
        op = OPS[node.op]
        in_grads = op.vjp(g, node.value, [n.value for n in node.inputs], node.attrs)
        for inp, gi in zip(node.inputs, in_grads):
            if inp.tape is None or gi is None:
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
    tape.gradients = grads
    return grads


# ---------------------------------------------------------------------------
# Functional wrappers
# ---------------------------------------------------------------------------


def _tape_of(*nodes):
    for n in nodes:
        if n.tape is not None:
            return n.tape
    return None


def _as_node(x):
    return x if isinstance(x, Node) else constant(x)


def _binary(kind):
    def fn(a, b):
        a, b = _as_node(a), _as_node(b)
        return forward(_tape_of(a, b), kind, (a, b))

    fn.__name__ = kind
    return fn


add = _binary("add")
sub = _binary("sub")
mul = _binary("mul")
matmul = _binary("matmul")


def _unary(kind):
    def fn(x):
        return forward(x.tape, kind, (x,))

    fn.__name__ = kind
    return fn


gelu = _unary("gelu")
silu = _unary("silu")
square = _unary("square")
log = _unary("log")
exp = _unary("exp")
sin = _unary("sin")
cos = _unary("cos")


def concat(nodes, axis=-1):
    nodes = [_as_node(n) for n in nodes]
    return forward(_tape_of(*nodes), "concat", nodes, axis=axis)


def mean(x, axis=None):
    return forward(x.tape, "mean", (x,), axis=axis)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    return forward(x.tape, "sum", (x,), axis=axis)


def scale(x, factor):
    return forward(x.tape, "scale", (x,), factor=float(factor))


def sinusoid(x, freqs):
    return forward(x.tape, "sinusoid", (x,), freqs=np.asarray(freqs, dtype=np.float64))


def slice_cols(x, start, stop):
    return forward(x.tape, "slice", (x,), start=int(start), stop=int(stop))


def clamp(x, lo, hi):
    return forward(x.tape, "clamp", (x,), lo=float(lo), hi=float(hi))
