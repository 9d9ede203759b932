"""Euler and Dormand-Prince integration, divergence estimators, sampling and
ODE log-likelihood.

A *field* is any callable ``field(x, t) -> Node`` taking an (n, d) node and
an (n,) time array. Working on nodes lets the same callable serve plain
integration (untracked constants) and divergence computation (``x`` a tape
leaf). :class:`ModelField` adapts a :class:`~vrfm.models.VelocityModel`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import distributions as D
from .models import VelocityModel
from .nn import Tape
from .nn import tape as T

__all__ = [
    "ModelField",
    "ReversedField",
    "Trajectory",
    "SolverConfig",
    "SolverError",
    "NonFiniteState",
    "MaxNFEExceeded",
    "integrate_euler",
    "integrate_dopri5",
    "integrate",
    "exact_divergence",
    "hutchinson_divergence",
    "sample",
    "log_likelihood",
    "write_trajectories_csv",
]


class SolverError(RuntimeError):
    pass


class NonFiniteState(SolverError):
    def __init__(self, step):
        super().__init__(f"non-finite state at step {step}")
        self.step = step


class MaxNFEExceeded(SolverError):
    def __init__(self, max_nfe, partial):
        super().__init__(f"exceeded max_nfe={max_nfe} before reaching the end time")
        self.max_nfe = max_nfe
        self.partial = partial


class ModelField:
    """Velocity model with a latent held fixed for the whole trajectory."""

    def __init__(self, model: VelocityModel, z=None):
        if model.latent_dim > 0 and z is None:
            raise ValueError("latent model needs a fixed z per trajectory")
        self.model = model
        self.z = None if z is None else np.asarray(z, dtype=np.float64)

    def __call__(self, x, t, rows=None):
        n = x.shape[0]
        self.model.params.bind(None)
        tn = T.constant(np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1)))
        z = None
        if self.z is not None:
            zz = self.z if rows is None else self.z[rows]
            z = T.constant(np.broadcast_to(zz.reshape(-1, self.z.shape[-1]), (n, self.z.shape[-1])))
        return self.model.forward(x, tn, z)


class ReversedField:
    """``s -> -v(x, 1 - s)``: integrating forward in ``s`` runs ``v`` backward in time."""

    def __init__(self, field):
        self.field = field

    def __call__(self, x, s, rows=None):
        return T.scale(_call(self.field, x, 1.0 - np.asarray(s), rows), -1.0)


def _call(field, x, t, rows=None):
    if rows is not None and isinstance(field, (ModelField, ReversedField)):
        return field(x, t, rows)
    return field(x, t)


def _evaluator(field):
    """Array-level ``f(x, t, rows) -> (n, d)`` for a node-level field."""

    def f(x, t, rows=None):
        return _call(field, T.constant(x), t, rows).value

    return f


@dataclass
class Trajectory:
    """``states[k]`` is the state at ``times[k]``; batched runs add a row axis."""

    times: np.ndarray
    states: np.ndarray
    nfe: int | np.ndarray

    @property
    def final(self):
        return self.states[-1]


@dataclass(frozen=True)
class SolverConfig:
    method: str = "euler"
    steps: int = 100
    rtol: float = 1e-5
    atol: float = 1e-5
    h0: float = 1e-2
    max_nfe: int = 100_000

    def __post_init__(self):
        if self.method not in ("euler", "dopri5"):
            raise ValueError(f"unknown solver {self.method!r}")
        if self.method == "euler" and self.steps < 1:
            raise ValueError("euler needs steps >= 1")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")

    @property
    def label(self):
        return "adaptive" if self.method == "dopri5" else str(self.steps)

    def to_dict(self):
        return {k: getattr(self, k) for k in ("method", "steps", "rtol", "atol", "h0", "max_nfe")}


def _rows(x_start):
    x = np.asarray(x_start, dtype=np.float64)
    single = x.ndim == 1
    return (x[None, :] if single else x), single


def integrate_euler(field, x_start, n_steps, record=True, t0=0.0, t1=1.0) -> Trajectory:
    """Fixed-step explicit Euler from ``t0`` to ``t1``."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    f = _evaluator(field) if not getattr(field, "_array_level", False) else field
    x, single = _rows(x_start)
    n = x.shape[0]
    h = (t1 - t0) / n_steps
    times = t0 + h * np.arange(n_steps + 1)
    times[-1] = t1
    states = [x] if record else None
    for k in range(n_steps):
        x = x + h * f(x, np.full(n, times[k]))
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(k)
        if record:
            states.append(x)
    out = np.stack(states) if record else x[None]
    if not record:
        times = np.array([t1])
    if single:
        out = out[:, 0, :]
    return Trajectory(times, out, n_steps)


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

SAFETY = 0.9
FACTOR_MIN, FACTOR_MAX = 0.2, 10.0
_BETA = 0.04
_ALPHA = 0.2 - 0.75 * _BETA


def integrate_dopri5(
    field,
    x_start,
    rtol=1e-5,
    atol=1e-5,
    max_nfe=100_000,
    h0=1e-2,
    record=True,
    fixed_step=None,
    t0=0.0,
    t1=1.0,
) -> Trajectory:
    """Dormand-Prince 5(4) with per-row PI step-size control.

    Rows of a batched start advance independently (own time, step size and
    accept/reject decisions) while sharing vectorized field evaluations.
    ``nfe`` counts evaluations per row (an array for batched starts). With
    ``fixed_step`` set, error control is disabled and every step has that
    size, which is how the convergence order is measured.

    Batched trajectories with ``record=True`` are returned as per-row lists
    in ``states``/``times`` because rows accept different step sequences.
    """
    if rtol <= 0 or atol <= 0:
        raise ValueError("rtol and atol must be positive")
    f = _evaluator(field) if not getattr(field, "_array_level", False) else field
    x, single = _rows(x_start)
    x = x.copy()
    n, d = x.shape
    t = np.full(n, float(t0))
    h = np.full(n, float(fixed_step if fixed_step else h0))
    err_prev = np.full(n, 1e-4)
    nfe = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    hist_t = [[float(t0)] for _ in range(n)] if record else None
    hist_x = [[x[i].copy()] for i in range(n)] if record else None

    k1 = np.array(f(x, t), dtype=np.float64)  # updated in place below, so never a view
    nfe += 1
    span = t1 - t0
    while not done.all():
        idx = np.flatnonzero(~done)
        if np.any(nfe[idx] >= max_nfe):
            partial = _package(hist_t, hist_x, t, x, nfe, single, record)
            raise MaxNFEExceeded(max_nfe, partial)
        ti, xi, hi = t[idx], x[idx], h[idx]
        last = ti + hi >= t1 - 1e-12 * span
        hi = np.where(last, t1 - ti, hi)
        hc = hi[:, None]
        ks = [k1[idx]]
        for s in range(1, 7):
            xs = xi + hc * sum(a * k for a, k in zip(_A[s], ks) if a != 0.0)
            ks.append(f(xs, ti + _C[s] * hi, idx))
        nfe[idx] += 6
        x5 = xi + hc * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        if not np.all(np.isfinite(x5)):
            raise NonFiniteState(int(nfe.max()))
        if fixed_step:
            accept = np.ones(idx.size, dtype=bool)
            err = np.zeros(idx.size)
        else:
            err_vec = hc * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
            sc = atol + rtol * np.maximum(np.abs(xi), np.abs(x5))
            err = np.sqrt(np.mean((err_vec / sc) ** 2, axis=1))
            accept = err <= 1.0
        # PI controller on accepted steps, plain I controller after a rejection
        safe_err = np.maximum(err, 1e-10)
        fac_acc = SAFETY * safe_err ** (-_ALPHA) * err_prev[idx] ** _BETA
        fac_rej = np.minimum(1.0, SAFETY * safe_err ** (-0.2))
        fac = np.clip(np.where(accept, fac_acc, fac_rej), FACTOR_MIN, FACTOR_MAX)

        acc_idx = idx[accept]
        t_new = np.where(last, t1, ti + hi)
        t[acc_idx] = t_new[accept]
        x[acc_idx] = x5[accept]
        k1[acc_idx] = ks[6][accept]  # first-same-as-last
        err_prev[acc_idx] = np.maximum(err[accept], 1e-4)
        done[acc_idx] = last[accept]
        if not fixed_step:
            h[idx] = h[idx] * fac
        if record:
            for j in np.flatnonzero(accept):
                r = idx[j]
                hist_t[r].append(float(t[r]))
                hist_x[r].append(x[r].copy())
    return _package(hist_t, hist_x, t, x, nfe, single, record)


def _package(hist_t, hist_x, t, x, nfe, single, record):
    if record:
        times = [np.array(ts) for ts in hist_t]
        states = [np.stack(xs) for xs in hist_x]
        if single:
            return Trajectory(times[0], states[0], int(nfe[0]))
        return Trajectory(times, states, nfe.copy())
    final = x.copy()
    if single:
        return Trajectory(np.array([t[0]]), final[0][None], int(nfe[0]))
    return Trajectory(t.copy()[None], final[None], nfe.copy())


def integrate(field, x_start, solver: SolverConfig, record=False):
    if solver.method == "euler":
        return integrate_euler(field, x_start, solver.steps, record=record)
    return integrate_dopri5(
        field, x_start, rtol=solver.rtol, atol=solver.atol, max_nfe=solver.max_nfe, h0=solver.h0, record=record
    )


# ---------------------------------------------------------------------------
# divergence
# ---------------------------------------------------------------------------


def _tracked(field, x, t, rows=None):
    x_arr, single = _rows(x)
    tape = Tape()
    xn = tape.leaf(x_arr)
    n = x_arr.shape[0]
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
    return tape, xn, _call(field, xn, tt, rows), single


def _exact_trace(tape, xn, v):
    div = np.zeros(xn.shape[0])
    if v.tape is None:
        # field ignores x entirely
        return div
    for j in range(xn.shape[1]):
        tape.backward(T.sum(T.slice_cols(v, j, j + 1)))
        div += tape.grad(xn)[:, j]
    return div


def _hutchinson_trace(tape, xn, v, n_probes, rng):
    n, d = xn.shape
    est = np.zeros((n_probes, n))
    if v.tape is not None:
        for p in range(n_probes):
            eps = rng.choice(np.array([-1.0, 1.0]), size=(n, d))
            tape.backward(T.sum(T.mul(v, T.constant(eps))))
            est[p] = np.sum(tape.grad(xn) * eps, axis=1)
    return est


def exact_divergence(field, x, t, rows=None):
    """Trace of d field / d x, one reverse pass per data dimension."""
    tape, xn, v, single = _tracked(field, x, t, rows)
    div = _exact_trace(tape, xn, v)
    tape.clear()
    return float(div[0]) if single else div


def hutchinson_divergence(field, x, t, n_probes, rng, rows=None):
    """Rademacher-probe trace estimate; returns ``(estimate, stderr)``."""
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    tape, xn, v, single = _tracked(field, x, t, rows)
    est = _hutchinson_trace(tape, xn, v, n_probes, rng)
    tape.clear()
    mean = est.mean(axis=0)
    stderr = est.std(axis=0, ddof=1) / np.sqrt(n_probes) if n_probes > 1 else np.zeros_like(mean)
    if single:
        return float(mean[0]), float(stderr[0])
    return mean, stderr


def _value_and_divergence(field, x, t, rows, mode, n_probes, rng):
    tape, xn, v, _ = _tracked(field, x, t, rows)
    if mode == "exact":
        div = _exact_trace(tape, xn, v)
    else:
        div = _hutchinson_trace(tape, xn, v, n_probes, rng).mean(axis=0)
    tape.clear()
    return np.broadcast_to(v.value, xn.shape), div


# ---------------------------------------------------------------------------
# sampling and likelihood
# ---------------------------------------------------------------------------


def draw_latents(model, n, rng):
    return rng.standard_normal((n, model.latent_dim)) if model.latent_dim > 0 else None


def sample(model: VelocityModel, source_spec, n, solver: SolverConfig, rng, record=False, return_latents=False):
    """Push ``n`` source draws through the learned flow.

    For latent models one prior draw of ``z`` per sample is held fixed along
    its trajectory. Returns ``(samples, mean_nfe)`` or, with ``record``,
    ``(trajectory, mean_nfe)``.
    """
    x0 = D.sample(source_spec, n, rng)
    z = draw_latents(model, n, rng)
    traj = integrate(ModelField(model, z), x0, solver, record=record)
    mean_nfe = float(np.mean(traj.nfe))
    out = traj if record else traj.final
    if return_latents:
        return out, mean_nfe, z
    return out, mean_nfe


class _AugmentedField:
    """Reverse-time field on ``[x, acc]`` with ``d acc / ds = div v(x, 1 - s)``."""

    _array_level = True

    def __init__(self, field, d, divergence, n_probes, rng):
        self.field = field
        self.d = d
        self.divergence = divergence
        self.n_probes = n_probes
        self.rng = rng

    def __call__(self, state, s, rows=None):
        x = state[:, : self.d]
        t = 1.0 - np.asarray(s)
        v, div = _value_and_divergence(self.field, x, t, rows, self.divergence, self.n_probes, self.rng)
        return np.concatenate([-v, div[:, None]], axis=1)


def _log_likelihood_field(field, source_spec, x1, solver, divergence, n_probes, rng):
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, source_spec.dim)
    d = x1.shape[1]
    aug = _AugmentedField(field, d, divergence, n_probes, rng)
    state = np.concatenate([x1, np.zeros((x1.shape[0], 1))], axis=1)
    traj = integrate(aug, state, solver, record=False)
    end = traj.final
    x0, acc = end[:, :d], end[:, d]
    return D.log_density(source_spec, x0).reshape(-1) - acc


def log_likelihood(
    model_or_field,
    source_spec,
    x1,
    solver: SolverConfig | None = None,
    divergence="auto",
    z_policy=None,
    rng=None,
    n_latent=16,
    n_probes=8,
):
    """``log p1(x1)`` by integrating the augmented state from t=1 back to t=0.

    ``z_policy`` applies to latent models: ``"fixed_z"`` uses one prior draw
    (a conditional likelihood), ``"mc_marginal"`` log-mean-exps ``n_latent``
    prior draws. Baseline models and plain fields use ``"none"``.
    """
    solver = solver or SolverConfig("dopri5")
    rng = np.random.default_rng() if rng is None else rng
    x1 = np.asarray(x1, dtype=np.float64)
    single = x1.ndim <= 1
    x1r = x1.reshape(-1, source_spec.dim)
    n = x1r.shape[0]
    if divergence == "auto":
        divergence = "exact" if source_spec.dim <= 2 else "hutchinson"
    if divergence not in ("exact", "hutchinson"):
        raise ValueError(f"unknown divergence mode {divergence!r}")

    latent = isinstance(model_or_field, VelocityModel) and model_or_field.latent_dim > 0
    if z_policy is None:
        z_policy = "mc_marginal" if latent else "none"
    if latent and z_policy == "none":
        raise ValueError("latent model needs z_policy 'fixed_z' or 'mc_marginal'")
    if not latent and z_policy != "none":
        raise ValueError("z_policy applies to latent models only")

    if not latent:
        field = ModelField(model_or_field) if isinstance(model_or_field, VelocityModel) else model_or_field
        out = _log_likelihood_field(field, source_spec, x1r, solver, divergence, n_probes, rng)
    elif z_policy == "fixed_z":
        z = draw_latents(model_or_field, n, rng)
        out = _log_likelihood_field(ModelField(model_or_field, z), source_spec, x1r, solver, divergence, n_probes, rng)
    elif z_policy == "mc_marginal":
        k = int(n_latent)
        reps = np.repeat(x1r, k, axis=0)
        z = draw_latents(model_or_field, n * k, rng)
        ll = _log_likelihood_field(ModelField(model_or_field, z), source_spec, reps, solver, divergence, n_probes, rng)
        out = logsumexp(ll.reshape(n, k), axis=1) - np.log(k)
    else:
        raise ValueError(f"unknown z_policy {z_policy!r}")
    return float(out[0]) if single else out


def write_trajectories_csv(traj: Trajectory, path, latents=None):
    """Long format: ``traj,step,t,x0[,x1...]`` one row per recorded state."""
    times, states = traj.times, traj.states
    if isinstance(states, np.ndarray):
        if states.ndim == 2:
            states = states[:, None, :]
        per_row = [(times, states[:, i, :]) for i in range(states.shape[1])]
    else:
        per_row = list(zip(times, states))
    d = per_row[0][1].shape[1]
    with open(path, "w") as fh:
        fh.write("traj,step,t," + ",".join(f"x{j}" for j in range(d)) + "\n")
        for i, (ts, xs) in enumerate(per_row):
            for k, (tk, xk) in enumerate(zip(ts, xs)):
                fh.write(f"{i},{k},{float(tk)!r}," + ",".join(repr(float(v)) for v in xk) + "\n")
