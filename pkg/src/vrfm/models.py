"""Velocity network and posterior encoder.

Both networks follow the same pattern: every input gets its own encoder
(sinusoidal embedding followed by a two-layer GELU MLP), the embeddings are
concatenated and a decoder MLP maps them to the output. The velocity network
optionally takes a latent ``z`` through a three-layer MLP branch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import MLP, ParameterSet, Tape, sinusoidal_frequencies
from .nn import tape as T

__all__ = [
    "VelocityModelConfig",
    "PosteriorConfig",
    "LatentPosterior",
    "VelocityModel",
    "PosteriorEncoder",
    "sample_latent",
    "kl_standard_normal",
    "LOG_SIGMA_RANGE",
]

LOG_SIGMA_RANGE = (-7.0, 2.0)
CONDITIONING_INPUTS = ("x0", "x1", "xt", "t")


@dataclass(frozen=True)
class VelocityModelConfig:
    data_dim: int
    hidden_dim: int = 64
    embed_dim: int = 64
    latent_dim: int = 0
    latent_hidden: int = 128
    decoder_layers: int = 4
    max_period: float = 1e4

    def __post_init__(self):
        if self.data_dim < 1:
            raise ValueError("data_dim must be >= 1")
        if self.latent_dim < 0:
            raise ValueError("latent_dim must be >= 0")
        if self.decoder_layers < 1:
            raise ValueError("decoder_layers must be >= 1")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("embed_dim must be even and >= 2")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PosteriorConfig:
    latent_dim: int
    data_dim: int
    conditioning: tuple = ("x0", "x1", "xt")
    hidden_dim: int = 64
    embed_dim: int = 64
    max_period: float = 1e4

    def __post_init__(self):
        cond = tuple(self.conditioning)
        if not cond:
            raise ValueError("posterior conditioning must be a non-empty subset of x0, x1, xt, t")
        bad = set(cond) - set(CONDITIONING_INPUTS)
        if bad:
            raise ValueError(f"unknown conditioning inputs {sorted(bad)}")
        if len(set(cond)) != len(cond):
            raise ValueError("duplicate conditioning inputs")
        # canonical order keeps parameter layout independent of how the subset was listed
        object.__setattr__(self, "conditioning", tuple(c for c in CONDITIONING_INPUTS if c in cond))
        if self.latent_dim < 1:
            raise ValueError("posterior latent_dim must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["conditioning"] = list(self.conditioning)
        return d


@dataclass
class LatentPosterior:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if np.any(self.sigma <= 0):
            raise ValueError("posterior sigma must be strictly positive")


def _as_rows(x, width):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, width)


class _Encoder:
    """Sinusoidal embedding of each input column, then Linear-GELU-Linear."""

    def __init__(self, params, name, in_dim, embed_dim, hidden_dim, max_period, rng):
        self.freqs = sinusoidal_frequencies(embed_dim, max_period)
        self.mlp = MLP(params, name, [in_dim * embed_dim, hidden_dim, hidden_dim], rng)

    def __call__(self, x):
        return self.mlp(T.sinusoid(x, self.freqs))


class VelocityModel:
    """``v(x_t, t)`` or, with ``latent_dim > 0``, ``v(x_t, t, z)``."""

    def __init__(self, config: VelocityModelConfig, rng=None, seed=None):
        if rng is None:
            rng = np.random.default_rng(seed)
        c = self.config = config
        self.params = ParameterSet()
        self.t_enc = _Encoder(self.params, "t_enc", 1, c.embed_dim, c.hidden_dim, c.max_period, rng)
        self.x_enc = _Encoder(self.params, "x_enc", c.data_dim, c.embed_dim, c.hidden_dim, c.max_period, rng)
        width = 2 * c.hidden_dim
        self.z_enc = None
        if c.latent_dim > 0:
            self.z_enc = MLP(self.params, "z_enc", [c.latent_dim, c.latent_hidden, c.latent_hidden, c.latent_hidden], rng)
            width += c.latent_hidden
        dims = [width] + [c.hidden_dim] * (c.decoder_layers - 1) + [c.data_dim]
        self.decoder = MLP(self.params, "dec", dims, rng)

    @property
    def latent_dim(self):
        return self.config.latent_dim

    def forward(self, xt, t, z=None):
        """Tape-level forward on nodes; parameters must be bound."""
        if self.latent_dim > 0 and z is None:
            raise ValueError(f"latent model (latent_dim={self.latent_dim}) requires z")
        if self.latent_dim == 0 and z is not None:
            raise ValueError("baseline model (latent_dim=0) takes no z")
        parts = [self.t_enc(t), self.x_enc(xt)]
        if z is not None:
            if z.shape[-1] != self.latent_dim:
                raise ValueError(f"z has width {z.shape[-1]}, expected {self.latent_dim}")
            parts.append(self.z_enc(z))
        return self.decoder(T.concat(parts))

    def __call__(self, xt, t, z=None):
        """Inference on plain arrays: ``xt`` (n, d), ``t`` (n,) or scalar, ``z`` (n, k)."""
        xt = _as_rows(xt, self.config.data_dim)
        n = xt.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1))
        self.params.bind(None)
        zn = None
        if z is not None:
            z = np.asarray(z, dtype=np.float64)
            if self.latent_dim > 0 and z.shape[-1] != self.latent_dim:
                raise ValueError(f"z has width {z.shape[-1]}, expected {self.latent_dim}")
            zn = T.constant(_as_rows(z, max(self.latent_dim, z.shape[-1] if z.ndim else 1)))
        return self.forward(T.constant(xt), T.constant(t), zn).value


def velocity(model: VelocityModel, xt, t, z=None):
    """Single-point velocity: ``xt`` of length data_dim, scalar ``t``."""
    out = model(np.atleast_1d(xt)[None, :], t, None if z is None else np.atleast_1d(z)[None, :])
    return out[0]


class PosteriorEncoder:
    """Gaussian recognition model ``q(z | x0, x1, xt, t)`` over the configured inputs."""

    def __init__(self, config: PosteriorConfig, rng=None, seed=None):
        if rng is None:
            rng = np.random.default_rng(seed)
        c = self.config = config
        self.params = ParameterSet()
        self.branches = {}
        for name in c.conditioning:
            in_dim = 1 if name == "t" else c.data_dim
            self.branches[name] = _Encoder(self.params, f"q_{name}", in_dim, c.embed_dim, c.hidden_dim, c.max_period, rng)
        width = c.hidden_dim * len(c.conditioning)
        self.head = MLP(self.params, "q_head", [width, c.hidden_dim, c.hidden_dim, 2 * c.latent_dim], rng)

    @property
    def latent_dim(self):
        return self.config.latent_dim

    def forward(self, inputs: dict):
        """Return ``(mu, log_sigma)`` nodes; ``inputs`` maps input name to node."""
        emb = [self.branches[k](inputs[k]) for k in self.config.conditioning]
        out = self.head(emb[0] if len(emb) == 1 else T.concat(emb))
        k = self.latent_dim
        mu = T.slice_cols(out, 0, k)
        log_sigma = T.clamp(T.slice_cols(out, k, 2 * k), *LOG_SIGMA_RANGE)
        return mu, log_sigma

    def __call__(self, x0, x1, xt, t) -> LatentPosterior:
        d = self.config.data_dim
        xt = _as_rows(xt, d)
        n = xt.shape[0]
        arrays = {
            "x0": _as_rows(x0, d),
            "x1": _as_rows(x1, d),
            "xt": xt,
            "t": np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1)),
        }
        self.params.bind(None)
        mu, log_sigma = self.forward({k: T.constant(v) for k, v in arrays.items()})
        return LatentPosterior(mu.value, np.exp(log_sigma.value))


def posterior(encoder: PosteriorEncoder, x0, x1, xt, t) -> LatentPosterior:
    return encoder(x0, x1, xt, t)


def sample_latent(post: LatentPosterior, rng) -> np.ndarray:
    eps = rng.standard_normal(post.mu.shape)
    return post.mu + eps * post.sigma


def kl_standard_normal(post: LatentPosterior):
    """``KL(N(mu, sigma^2) || N(0, I))`` summed over the last axis."""
    mu, s2 = post.mu, post.sigma**2
    kl = 0.5 * np.sum(mu * mu + s2 - 1.0 - np.log(s2), axis=-1)
    return float(kl) if np.ndim(kl) == 0 else kl


def reparameterize(mu, log_sigma, eps):
    """Tape-level ``z = mu + eps * exp(log_sigma)``."""
    return T.add(mu, T.mul(T.constant(eps), T.exp(log_sigma)))


def kl_nodes(mu, log_sigma):
    """Tape-level per-row KL to the standard normal, shape (n,)."""
    inner = T.sub(T.add(T.square(mu), T.exp(T.scale(log_sigma, 2.0))), T.scale(log_sigma, 2.0))
    return T.scale(T.add(T.sum(inner, axis=-1), T.constant(-float(mu.shape[-1]))), 0.5)


def bind_on(tape: Tape | None, *models):
    for m in models:
        if m is not None:
            m.params.bind(tape)
