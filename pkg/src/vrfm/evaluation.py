"""Metric sweeps over solver settings for trained checkpoints."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import distributions as D
from . import metrics as M
from .ode import SolverConfig, sample

__all__ = [
    "write_samples_csv",
    "read_samples_csv",
    "solver_code", "evaluate_checkpoint", "aggregate_rows", "evaluate_checkpoints"]

_TEST_STREAM = 1
_GEN_STREAM = 2
_METRIC_STREAM = 3


def solver_code(steps):
    """Stable integer tag of a solver setting, used to key random streams."""
    return 0 if steps == "adaptive" else int(steps)


def _solver(steps, adaptive_cfg):
    if steps == "adaptive":
        return adaptive_cfg
    return SolverConfig("euler", steps=int(steps))


def _fit_metrics(gen, test, target, rng, n_projections, val_fraction):
    true_ll = M.true_log_likelihood(gen, target)
    h = M.select_parzen_bandwidth(gen, rng, val_fraction=val_fraction)
    parzen = M.parzen_log_likelihood(gen, test, h)
    if target.dim == 1:
        w = M.wasserstein_1d(gen, test)
    else:
        w = M.sliced_wasserstein(gen, test, n_projections=n_projections, rng=rng)
    return true_ll, parzen, w


def write_samples_csv(x, path):
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    np.savetxt(path, x, delimiter=",", header=",".join(f"x{j}" for j in range(x.shape[1])), comments="", fmt="%.17g")


def read_samples_csv(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def evaluate_checkpoint(
    ckpt,
    steps=(2, 5, 10, 50, 100, "adaptive"),
    n_generated=10_000,
    n_test=10_000,
    adaptive=None,
    n_projections=256,
    val_fraction=0.1,
    progress=None,
    sample_dir=None,
):
    """One :class:`MetricRow` per solver setting.

    Random streams are keyed on the checkpoint seed and the solver setting,
    so results do not depend on evaluation order. The held-out target set is
    shared across settings of the same checkpoint. With ``sample_dir`` the
    generated samples go to ``samples_<steps>.csv`` there.
    """
    adaptive = adaptive or SolverConfig("dopri5")
    model, _ = ckpt.build_models()
    source, target = ckpt.source_spec(), ckpt.target_spec()
    if source is None or target is None:
        raise ValueError("checkpoint carries no analytic source/target specs")
    test = D.sample(target, n_test, np.random.default_rng([ckpt.seed, _TEST_STREAM]))
    rows = []
    for s in steps:
        code = solver_code(s)
        gen_rng = np.random.default_rng([ckpt.seed, _GEN_STREAM, code])
        gen, nfe = sample(model, source, n_generated, _solver(s, adaptive), gen_rng)
        if not np.all(np.isfinite(gen)):
            raise FloatingPointError(f"non-finite samples at steps={s}")
        if sample_dir is not None:
            write_samples_csv(gen, Path(sample_dir) / f"samples_{s}.csv")
        met_rng = np.random.default_rng([ckpt.seed, _METRIC_STREAM, code])
        tll, pll, w = _fit_metrics(gen, test, target, met_rng, n_projections, val_fraction)
        row = M.MetricRow(ckpt.objective, str(s), str(ckpt.seed), tll, pll, w, nfe)
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def aggregate_rows(rows):
    """Append per-(method, steps) ``mean`` and ``std`` rows (sample std, 0 for one seed)."""
    groups = {}
    for r in rows:
        groups.setdefault((r.method, r.steps), []).append(r)
    out = list(rows)
    keys = M.METRIC_HEADER[3:]
    for (method, steps), grp in groups.items():
        vals = np.array([[getattr(r, k) for k in keys] for r in grp])
        mean = vals.mean(axis=0)
        std = vals.std(axis=0, ddof=1) if len(grp) > 1 else np.zeros(len(keys))
        out.append(M.MetricRow(method, steps, "mean", *mean))
        out.append(M.MetricRow(method, steps, "std", *std))
    return out


def evaluate_checkpoints(ckpts, **kwargs):
    if not ckpts:
        raise ValueError("no checkpoints to evaluate")
    dims = {c.model_config["data_dim"] for c in ckpts}
    if len(dims) != 1:
        raise ValueError(f"checkpoints mix data dimensions {sorted(dims)}")
    targets = {repr(c.target) for c in ckpts}
    if len(targets) != 1:
        raise ValueError("checkpoints were trained on different targets")
    rows = []
    for c in ckpts:
        rows.extend(evaluate_checkpoint(c, **kwargs))
    return aggregate_rows(rows)
