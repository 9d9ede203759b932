"""Parameters and the small set of layers the flow networks are built from."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .tape import Node, ShapeError, Tape

__all__ = [
    "Parameter",
    "ParameterSet",
    "Linear",
    "MLP",
    "sinusoidal_frequencies",
    "sinusoidal_embed",
    "mlp_forward",
]

ACTIVATIONS = {"gelu": T.gelu, "silu": T.silu, None: None}


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    requires_grad: bool = True

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)

    @property
    def shape(self):
        return self.value.shape


class ParameterSet:
    """Ordered, uniquely named collection of parameters.

    ``bind(tape)`` maps every parameter to a leaf node on the tape; layers
    look their node up by name during the forward pass. With ``tape=None``
    the nodes are untracked and inference records nothing.
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._nodes: dict[str, Node] = {}

    def add(self, name, value, requires_grad=True) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value, requires_grad)
        self._params[name] = p
        return p

    def __getitem__(self, name) -> Parameter:
        return self._params[name]

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def bind(self, tape: Tape | None):
        if tape is None:
            self._nodes = {k: T.constant(p.value) for k, p in self._params.items()}
        else:
            self._nodes = {k: tape.leaf(p.value, name=k) for k, p in self._params.items()}
        return self._nodes

    def node(self, name) -> Node:
        try:
            return self._nodes[name]
        except KeyError:
            raise RuntimeError(f"parameter {name!r} not bound; call bind() first") from None

    def gradients(self, tape: Tape) -> dict[str, np.ndarray]:
        return {k: tape.grad(n) for k, n in self._nodes.items() if self._params[k].requires_grad}

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self._params.items()}

    def load_state(self, state):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self._params[k].shape:
                raise ShapeError(f"parameter {k!r}: expected shape {self._params[k].shape}, got {v.shape}")
            self._params[k].value = v.copy()


class Linear:
    """Affine map ``x @ W + b`` with W of shape (in, out)."""

    def __init__(self, params: ParameterSet, name, in_dim, out_dim, rng):
        bound = 1.0 / np.sqrt(in_dim)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.params = params
        self.w = params.add(f"{name}.weight", rng.uniform(-bound, bound, size=(in_dim, out_dim)))
        self.b = params.add(f"{name}.bias", np.zeros(out_dim))

    def __call__(self, x: Node) -> Node:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.w.name}: expected input width {self.in_dim}, got {x.shape[-1]}")
        return T.add(T.matmul(x, self.params.node(self.w.name)), self.params.node(self.b.name))


class MLP:
    """Stack of Linear layers with an activation between consecutive layers."""

    def __init__(self, params, name, dims, rng, activation="gelu"):
        if len(dims) < 2:
            raise ValueError("MLP needs at least an input and an output width")
        self.layers = [Linear(params, f"{name}.{i}", a, b, rng) for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.activation = activation

    def __call__(self, x):
        return mlp_forward(self.layers, x, self.activation)


def mlp_forward(layers, x, activation="gelu"):
    """Alternate affine layers and activation; no activation after the last layer."""
    for prev, nxt in zip(layers[:-1], layers[1:]):
        if prev.out_dim != nxt.in_dim:
            raise ShapeError(f"layer chain broken: {prev.w.name} outputs {prev.out_dim}, {nxt.w.name} expects {nxt.in_dim}")
    act = ACTIVATIONS[activation]
    for i, layer in enumerate(layers):
        x = layer(x)
        if act is not None and i < len(layers) - 1:
            x = act(x)
    return x


def sinusoidal_frequencies(dim, max_period=1e4):
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    if half == 1:
        return np.ones(1)
    return max_period ** (-np.arange(half) / (half - 1))


def sinusoidal_embed(value, dim, max_period=1e4):
    """Interleaved ``[sin(v w0), cos(v w0), sin(v w1), ...]`` for a scalar ``value``.

    Frequencies run geometrically from 1 down to ``1 / max_period``.
    """
    freqs = sinusoidal_frequencies(dim, max_period)
    return T._sinusoid([np.array([float(value)])], {"freqs": freqs})
