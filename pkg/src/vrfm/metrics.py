"""Distribution-fit metrics and the velocity-ambiguity analyzer."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from . import distributions as D
from .models import VelocityModel

__all__ = [
    "true_log_likelihood",
    "parzen_log_likelihood",
    "select_parzen_bandwidth",
    "wasserstein_1d",
    "sliced_wasserstein",
    "exact_wasserstein",
    "AmbiguityGrid",
    "AmbiguityReport",
    "ambiguity_map",
    "MetricRow",
    "METRIC_HEADER",
    "write_metric_rows",
    "read_metric_rows",
    "crossing_pairs",
]


def true_log_likelihood(generated, target_spec) -> float:
    """Mean analytic target log-density of generated samples."""
    x = np.asarray(generated, dtype=np.float64).reshape(-1, target_spec.dim)
    if x.shape[0] < 1:
        raise ValueError("need at least one generated sample")
    return float(np.mean(D.log_density(target_spec, x)))


def _parzen_scores(generated, test, bandwidth, chunk=512):
    gen = np.asarray(generated, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if gen.ndim == 1:
        gen = gen[:, None]
    if test.ndim == 1:
        test = test.reshape(-1, gen.shape[1])
    n, d = gen.shape
    h2 = bandwidth * bandwidth
    const = -0.5 * d * np.log(2.0 * np.pi * h2) - np.log(n)
    gsq = np.sum(gen * gen, axis=1)
    out = np.empty(test.shape[0])
    for s in range(0, test.shape[0], chunk):
        x = test[s : s + chunk]
        sq = np.sum(x * x, axis=1)[:, None] - 2.0 * x @ gen.T + gsq[None, :]
        np.maximum(sq, 0.0, out=sq)
        out[s : s + chunk] = logsumexp(-0.5 * sq / h2, axis=1) + const
    return out


def parzen_log_likelihood(generated, test, bandwidth) -> float:
    """Mean over ``test`` of the log of a Gaussian KDE built on ``generated``."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    if len(generated) < 1 or len(test) < 1:
        raise ValueError("need at least one generated and one test point")
    return float(np.mean(_parzen_scores(generated, test, bandwidth)))


PARZEN_GRID = np.logspace(-2, 0, 20)


def select_parzen_bandwidth(generated, rng, grid=PARZEN_GRID, val_fraction=0.1):
    """Bandwidth maximizing held-out likelihood of a validation split of ``generated``."""
    gen = np.asarray(generated, dtype=np.float64)
    perm = rng.permutation(gen.shape[0])
    n_val = max(1, int(round(val_fraction * gen.shape[0])))
    val, fit = gen[perm[:n_val]], gen[perm[n_val:]]
    scores = [parzen_log_likelihood(fit, val, h) for h in grid]
    return float(grid[int(np.argmax(scores))])


def wasserstein_1d(a, b) -> float:
    """W1 between equal-size 1-D samples via sorted pairing."""
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if a.size != b.size:
        raise ValueError(f"sample counts differ: {a.size} vs {b.size}")
    return float(np.mean(np.abs(a - b)))


def sliced_wasserstein(a, b, n_projections=256, rng=None, return_stderr=False):
    """Mean 1-D W1 over uniformly random unit directions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"sample sets differ in shape: {a.shape} vs {b.shape}")
    if n_projections < 1:
        raise ValueError("n_projections must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    dirs = rng.standard_normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    per = np.mean(np.abs(pa - pb), axis=0)
    value = float(per.mean())
    if return_stderr:
        se = float(per.std(ddof=1) / np.sqrt(n_projections)) if n_projections > 1 else 0.0
        return value, se
    return value


def exact_wasserstein(a, b) -> float:
    """W1 by optimal assignment; O(n^3), meant for n <= 2000."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("sample sets differ in shape")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].mean())


# ---------------------------------------------------------------------------
# velocity ambiguity
# ---------------------------------------------------------------------------

DEFAULT_PROBES = ((0.0, 0.0), (0.0, 0.5), (0.0, 0.75), (-1.0, 0.95))


@dataclass(frozen=True)
class AmbiguityGrid:
    """Bin centers over (x, t). For d > 1 the x axis runs along the first
    coordinate with the others held at ``offset``."""

    x_centers: tuple = tuple(np.round(np.linspace(-2.0, 2.0, 21), 10))
    t_centers: tuple = tuple(np.round(np.arange(20) * 0.05, 10))
    x_halfwidth: float = 0.1
    t_halfwidth: float = 0.025
    probes: tuple = DEFAULT_PROBES
    min_count: int = 100
    max_draws: int = 10_000_000
    hist_edges: tuple = tuple(np.linspace(-6.0, 6.0, 49))
    offset: float = 0.0

    def point(self, x, dim):
        p = np.full(dim, self.offset)
        p[0] = x
        return p

    def to_dict(self):
        return {
            "x_centers": list(self.x_centers),
            "t_centers": list(self.t_centers),
            "x_halfwidth": self.x_halfwidth,
            "t_halfwidth": self.t_halfwidth,
            "probes": [list(p) for p in self.probes],
            "min_count": self.min_count,
            "max_draws": self.max_draws,
            "hist_edges": list(self.hist_edges),
            "offset": self.offset,
        }


@dataclass
class AmbiguityReport:
    source: str
    x_centers: np.ndarray
    t_centers: np.ndarray
    std: np.ndarray  # (n_t, n_x), NaN where masked
    mask: np.ndarray  # True where the bin has enough samples
    counts: np.ndarray
    probe_samples: dict = field(default_factory=dict)
    hist_edges: np.ndarray | None = None

    def histograms(self):
        return {p: np.histogram(v[:, 0], bins=self.hist_edges)[0] for p, v in self.probe_samples.items()}

    def std_at(self, x, t):
        i = int(np.argmin(np.abs(self.t_centers - t)))
        j = int(np.argmin(np.abs(self.x_centers - x)))
        return self.std[i, j]

    def write_grid_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "x", "t", "std", "count", "masked"])
            for i, t in enumerate(self.t_centers):
                for j, x in enumerate(self.x_centers):
                    s = self.std[i, j]
                    w.writerow([self.source, repr(float(x)), repr(float(t)), "" if np.isnan(s) else repr(float(s)), int(self.counts[i, j]), int(not self.mask[i, j])])

    def write_histograms_csv(self, path):
        hists = self.histograms()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "probe_x", "probe_t", "bin_lo", "bin_hi", "count"])
            for (px, pt), counts in hists.items():
                for lo, hi, c in zip(self.hist_edges[:-1], self.hist_edges[1:], counts):
                    w.writerow([self.source, px, pt, repr(float(lo)), repr(float(hi)), int(c)])


def _spread(v):
    # total standard deviation: sqrt of the covariance trace. Shifting by the
    # first row first makes identical rows give exactly zero.
    return float(np.sqrt(np.sum(np.var(v - v[:1], axis=0))))


def _model_velocities(model, point, t, n, rng):
    if model.latent_dim == 0:
        v = model(point[None, :], t)
        return np.repeat(v, n, axis=0)
    z = rng.standard_normal((n, model.latent_dim))
    return model(np.repeat(point[None, :], n, axis=0), t, z)


def ambiguity_map(velocity_source, grid: AmbiguityGrid = AmbiguityGrid(), n_per_bin=200, rng=None, specs=None):
    """Per-bin velocity spread over the (x, t) grid.

    ``velocity_source`` is ``"ground_truth"`` (requires ``specs=(source,
    target)``) or a trained :class:`VelocityModel`. Latent models are queried
    at the bin center with fresh prior draws of ``z``; baseline models give a
    single deterministic velocity, so their spread is exactly zero.
    """
    rng = np.random.default_rng() if rng is None else rng
    xs = np.asarray(grid.x_centers, dtype=np.float64)
    ts = np.asarray(grid.t_centers, dtype=np.float64)
    std = np.full((ts.size, xs.size), np.nan)
    counts = np.zeros((ts.size, xs.size), dtype=np.int64)

    if isinstance(velocity_source, str):
        if velocity_source != "ground_truth":
            raise ValueError(f"unknown velocity source {velocity_source!r}")
        if specs is None:
            raise ValueError("ground-truth ambiguity needs specs=(source, target)")
        source, target = specs
        dim = source.dim
        tag = "ground_truth"

        def velocities(point, t, n):
            return D.conditional_velocity_samples(
                source, target, point, t, (grid.x_halfwidth, grid.t_halfwidth), n, rng,
                max_draws=grid.max_draws, min_count=grid.min_count,
            )
    elif isinstance(velocity_source, VelocityModel):
        dim = velocity_source.config.data_dim
        tag = "model_vrfm" if velocity_source.latent_dim > 0 else "model_rfm"

        def velocities(point, t, n):
            return _model_velocities(velocity_source, point, t, n, rng)
    else:
        raise TypeError("velocity_source must be 'ground_truth' or a VelocityModel")

    for i, t in enumerate(ts):
        for j, x in enumerate(xs):
            try:
                v = velocities(grid.point(x, dim), float(t), n_per_bin)
            except D.InsufficientOccupancy as e:
                counts[i, j] = e.count
                continue
            counts[i, j] = v.shape[0]
            std[i, j] = _spread(v)

    probes = {}
    for px, pt in grid.probes:
        try:
            probes[(px, pt)] = velocities(grid.point(px, dim), float(pt), n_per_bin)
        except D.InsufficientOccupancy:
            continue
    return AmbiguityReport(tag, xs, ts, std, ~np.isnan(std), counts, probes, np.asarray(grid.hist_edges))


def ambiguity_correlation(report: AmbiguityReport, reference: AmbiguityReport) -> float:
    """Pearson r between two std fields over bins unmasked in both."""
    m = report.mask & reference.mask
    return float(np.corrcoef(report.std[m], reference.std[m])[0, 1])


# ---------------------------------------------------------------------------
# metric tables
# ---------------------------------------------------------------------------

METRIC_HEADER = ("method", "steps", "seed", "true_ll", "parzen_ll", "wasserstein", "nfe")


@dataclass
class MetricRow:
    method: str
    steps: str
    seed: str
    true_ll: float
    parzen_ll: float
    wasserstein: float
    nfe: float

    def __post_init__(self):
        for k in METRIC_HEADER[3:]:
            setattr(self, k, float(getattr(self, k)))

    def as_list(self):
        return [self.method, self.steps, self.seed] + [repr(float(getattr(self, k))) for k in METRIC_HEADER[3:]]


def write_metric_rows(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_HEADER)
        for r in rows:
            w.writerow(r.as_list())


def read_metric_rows(path):
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return [
            MetricRow(d["method"], d["steps"], d["seed"], *(float(d[k]) for k in METRIC_HEADER[3:]))
            for d in r
        ]


# ---------------------------------------------------------------------------
# trajectory crossings
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _orient(ax, ay, bx, by, cx, cy):
    v = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    return (v > 0.0) - (v < 0.0)


@numba.njit(cache=True)
def _on_segment(ax, ay, bx, by, cx, cy):
    return min(ax, bx) <= cx <= max(ax, bx) and min(ay, by) <= cy <= max(ay, by)


@numba.njit(cache=True)
def _segments_intersect(p, q, r, s):
    o1 = _orient(p[0], p[1], q[0], q[1], r[0], r[1])
    o2 = _orient(p[0], p[1], q[0], q[1], s[0], s[1])
    o3 = _orient(r[0], r[1], s[0], s[1], p[0], p[1])
    o4 = _orient(r[0], r[1], s[0], s[1], q[0], q[1])
    if o1 != o2 and o3 != o4:
        return True
    # collinear touching
    if o1 == 0 and _on_segment(p[0], p[1], q[0], q[1], r[0], r[1]):
        return True
    if o2 == 0 and _on_segment(p[0], p[1], q[0], q[1], s[0], s[1]):
        return True
    if o3 == 0 and _on_segment(r[0], r[1], s[0], s[1], p[0], p[1]):
        return True
    if o4 == 0 and _on_segment(r[0], r[1], s[0], s[1], q[0], q[1]):
        return True
    return False


@numba.njit(cache=True)
def _paths_cross(a, b):
    for i in range(a.shape[0] - 1):
        axl = min(a[i, 0], a[i + 1, 0])
        axh = max(a[i, 0], a[i + 1, 0])
        ayl = min(a[i, 1], a[i + 1, 1])
        ayh = max(a[i, 1], a[i + 1, 1])
        for j in range(b.shape[0] - 1):
            if max(b[j, 0], b[j + 1, 0]) < axl or min(b[j, 0], b[j + 1, 0]) > axh:
                continue
            if max(b[j, 1], b[j + 1, 1]) < ayl or min(b[j, 1], b[j + 1, 1]) > ayh:
                continue
            if _segments_intersect(a[i], a[i + 1], b[j], b[j + 1]):
                return True
    return False


@numba.njit(cache=True)
def _all_crossings(paths, lo, hi, limit):
    n = paths.shape[0]
    out = np.empty((limit, 2), dtype=np.int64)
    k = 0
    for i in range(n):
        for j in range(i + 1, n):
            if hi[i, 0] < lo[j, 0] or hi[j, 0] < lo[i, 0] or hi[i, 1] < lo[j, 1] or hi[j, 1] < lo[i, 1]:
                continue
            if _paths_cross(paths[i], paths[j]):
                out[k, 0] = i
                out[k, 1] = j
                k += 1
                if k == limit:
                    return out[:k]
    return out[:k]


def crossing_pairs(paths, limit=None):
    """Index pairs ``(i, j)`` of polylines that intersect.

    ``paths`` is (n_paths, n_points, 2); each path is the piecewise-linear
    curve through its points. Closed segments are used, so touching counts.
    ``limit`` stops the search after that many pairs.
    """
    paths = np.ascontiguousarray(paths, dtype=np.float64)
    if paths.ndim != 3 or paths.shape[2] != 2:
        raise ValueError(f"paths must have shape (n_paths, n_points, 2), got {paths.shape}")
    n = paths.shape[0]
    limit = n * (n - 1) // 2 if limit is None else int(limit)
    if limit < 1 or n < 2:
        return []
    lo, hi = paths.min(axis=1), paths.max(axis=1)
    found = _all_crossings(paths, lo, hi, limit)
    return [(int(a), int(b)) for a, b in found]
