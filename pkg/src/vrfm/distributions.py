"""Analytic source/target densities, independent couplings and the
straight-line interpolation path used to build regression targets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "Component",
    "DistributionSpec",
    "CouplingBatch",
    "InsufficientOccupancy",
    "BUILTIN_SPECS",
    "builtin_spec",
    "sample",
    "log_density",
    "sample_coupling",
    "make_coupling",
    "conditional_velocity_samples",
]

DEFAULT_MODE_STD_1D = 0.15
DEFAULT_MODE_STD_2D = 0.1


class InsufficientOccupancy(RuntimeError):
    """Too few couplings landed in a (x, t) bin."""

    def __init__(self, count, needed, draws):
        super().__init__(f"insufficient bin occupancy: kept {count} of the {needed} required after {draws} draws")
        self.count = count
        self.needed = needed
        self.draws = draws


@dataclass(frozen=True)
class Component:
    weight: float
    mean: tuple
    std: float


@dataclass(frozen=True)
class DistributionSpec:
    """Isotropic Gaussian mixture; ``kind="gaussian"`` is the one-component case."""

    kind: str
    dim: int
    components: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in ("gaussian", "mixture"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if not self.components:
            raise ValueError("distribution needs at least one component")
        if self.kind == "gaussian" and len(self.components) != 1:
            raise ValueError("a gaussian spec has exactly one component")
        total = 0.0
        for c in self.components:
            if len(c.mean) != self.dim:
                raise ValueError(f"component mean {c.mean} does not have length {self.dim}")
            if not c.std > 0:
                raise ValueError(f"component std must be > 0, got {c.std}")
            if not c.weight > 0:
                raise ValueError(f"component weight must be > 0, got {c.weight}")
            total += c.weight
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"component weights sum to {total!r}, expected 1")

    @property
    def weights(self):
        return np.array([c.weight for c in self.components])

    @property
    def means(self):
        return np.array([c.mean for c in self.components], dtype=np.float64).reshape(-1, self.dim)

    @property
    def stds(self):
        return np.array([c.std for c in self.components])

    def mean(self):
        return self.weights @ self.means

    def covariance(self):
        mu = self.mean()
        cov = np.zeros((self.dim, self.dim))
        for w, m, s in zip(self.weights, self.means, self.stds):
            d = m - mu
            cov += w * (s * s * np.eye(self.dim) + np.outer(d, d))
        return cov

    def to_dict(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "components": [{"weight": c.weight, "mean": list(c.mean), "std": c.std} for c in self.components],
        }

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - {"kind", "dim", "components"}
        if extra:
            raise ValueError(f"unknown distribution keys: {sorted(extra)}")
        comps = tuple(
            Component(float(c["weight"]), tuple(float(v) for v in c["mean"]), float(c["std"])) for c in d["components"]
        )
        return cls(d["kind"], int(d["dim"]), comps)


def gaussian(mean, std=1.0):
    mean = tuple(float(v) for v in np.atleast_1d(mean))
    return DistributionSpec("gaussian", len(mean), (Component(1.0, mean, float(std)),))


def ring_mixture(n_modes, radius, std):
    angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
    comps = tuple(
        Component(1.0 / n_modes, (float(radius * np.cos(a)), float(radius * np.sin(a))), float(std)) for a in angles
    )
    return DistributionSpec("mixture", 2, comps)


def _bimodal(std):
    return DistributionSpec("mixture", 1, (Component(0.5, (-1.0,), std), Component(0.5, (1.0,), std)))


BUILTIN_SPECS = ("source_1d", "target_1d_bimodal", "source_2d_circle", "target_2d_circle")


def builtin_spec(name, mode_std=None) -> DistributionSpec:
    """The synthetic 1D/2D distributions. ``mode_std`` overrides the mixture component std."""
    if name == "source_1d":
        return gaussian(0.0, 1.0)
    if name == "target_1d_bimodal":
        return _bimodal(DEFAULT_MODE_STD_1D if mode_std is None else mode_std)
    if name == "source_2d_circle":
        return ring_mixture(6, 1.0 / 3.0, DEFAULT_MODE_STD_2D if mode_std is None else mode_std)
    if name == "target_2d_circle":
        return ring_mixture(6, 1.0, DEFAULT_MODE_STD_2D if mode_std is None else mode_std)
    raise ValueError(f"unknown builtin distribution {name!r}; expected one of {BUILTIN_SPECS}")


def sample(spec: DistributionSpec, n, rng) -> np.ndarray:
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    if len(spec.components) == 1:
        idx = np.zeros(n, dtype=np.int64)
    else:
        idx = rng.choice(len(spec.components), size=n, p=spec.weights)
    noise = rng.standard_normal((n, spec.dim))
    return spec.means[idx] + spec.stds[idx, None] * noise


def component_log_densities(spec: DistributionSpec, x) -> np.ndarray:
    """(n, K) array of ``log w_k + log N(x; mu_k, s_k^2 I)``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, spec.dim)
    means, stds = spec.means, spec.stds
    sq = ((x[:, None, :] - means[None]) ** 2).sum(-1)
    log_norm = -0.5 * spec.dim * np.log(2.0 * np.pi * stds**2)
    return np.log(spec.weights) + log_norm - 0.5 * sq / stds**2


def log_density(spec: DistributionSpec, x):
    """Log density at ``x``; a single point of length ``dim`` gives a float."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim <= 1 and x.size == spec.dim
    out = logsumexp(component_log_densities(spec, x), axis=1)
    return float(out[0]) if single else out


@dataclass
class CouplingBatch:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    v: np.ndarray

    def __len__(self):
        return self.x0.shape[0]


def make_coupling(x0, x1, t) -> CouplingBatch:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    tc = t[:, None]
    return CouplingBatch(x0, x1, t, (1.0 - tc) * x0 + tc * x1, x1 - x0)


def _draw(spec_or_data, n, rng):
    if isinstance(spec_or_data, DistributionSpec):
        return sample(spec_or_data, n, rng)
    data = np.asarray(spec_or_data)
    return data[rng.integers(0, data.shape[0], size=n)]


def sample_coupling(source, target, n, rng) -> CouplingBatch:
    """Independent coupling with per-row ``t ~ U(0, 1)``.

    ``target`` may also be a dataset array, in which case rows are drawn
    uniformly with replacement.
    """
    d0 = source.dim if isinstance(source, DistributionSpec) else np.asarray(source).shape[1]
    d1 = target.dim if isinstance(target, DistributionSpec) else np.asarray(target).shape[1]
    if d0 != d1:
        raise ValueError(f"source dim {d0} != target dim {d1}")
    x0 = _draw(source, n, rng)
    x1 = _draw(target, n, rng)
    t = rng.uniform(0.0, 1.0, size=n)
    return make_coupling(x0, x1, t)


def conditional_velocity_samples(
    source,
    target,
    xt_center,
    t,
    bin_halfwidth=(0.1, 0.025),
    n_wanted=200,
    rng=None,
    max_draws=10_000_000,
    min_count=100,
    chunk=200_000,
):
    """Velocities ``x1 - x0`` of couplings whose ``(xt, t)`` lands in one bin.

    The bin is the box ``|xt - xt_center| <= hx`` (every coordinate),
    ``|t' - t| <= ht``. Since ``t`` is uniform and independent of the
    coupling, ``t'`` is drawn directly from the bin's time window; only the
    spatial condition is rejection sampled. Raises
    :class:`InsufficientOccupancy` when fewer than ``min_count`` rows are
    kept after ``max_draws`` couplings.
    """
    if not 0.0 <= t < 1.0:
        raise ValueError(f"bin time must lie in [0, 1), got {t}")
    hx, ht = (bin_halfwidth, 0.025) if np.isscalar(bin_halfwidth) else bin_halfwidth
    if hx <= 0 or ht <= 0:
        raise ValueError("bin half-widths must be positive")
    rng = np.random.default_rng() if rng is None else rng
    center = np.atleast_1d(np.asarray(xt_center, dtype=np.float64))
    t_lo, t_hi = max(0.0, t - ht), min(1.0, t + ht)
    kept = []
    n_kept = 0
    draws = 0
    while n_kept < n_wanted and draws < max_draws:
        m = int(min(chunk, max_draws - draws))
        x0 = _draw(source, m, rng)
        x1 = _draw(target, m, rng)
        tt = rng.uniform(t_lo, t_hi, size=m)[:, None]
        xt = (1.0 - tt) * x0 + tt * x1
        hit = np.all(np.abs(xt - center) <= hx, axis=1)
        if hit.any():
            v = (x1 - x0)[hit]
            kept.append(v)
            n_kept += v.shape[0]
        draws += m
    if n_kept < min(min_count, n_wanted):
        raise InsufficientOccupancy(n_kept, min(min_count, n_wanted), draws)
    return np.concatenate(kept)[:n_wanted]
