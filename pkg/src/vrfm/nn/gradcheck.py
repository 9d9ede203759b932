from __future__ import annotations

import numpy as np

from .tape import Tape

__all__ = ["grad_check", "numerical_grad", "parameter_grad_check"]


def numerical_grad(f, point, h=1e-5):
    """Central finite differences of scalar ``f`` (array -> float)."""
    x = np.array(point, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def grad_check(function, point, h=1e-5, floor=1e-6):
    """Max relative error between autodiff and finite-difference gradients.

    ``function(tape, x_node)`` builds a scalar node from a leaf holding
    ``point``. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``, so coordinates where both gradients
    vanish count as exact.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(point)
    tape.backward(function(tape, x))
    auto = tape.grad(x)

    def value(p):
        t = Tape()
        return function(t, t.leaf(p)).value

    num = numerical_grad(value, point, h)
    denom = np.maximum(np.maximum(np.abs(auto), np.abs(num)), floor)
    err = np.abs(auto - num) / denom
    return float(err.max()) if err.size else 0.0


def parameter_grad_check(loss_fn, param_sets, h=1e-5, floor=1e-6, coords=8, rng=None):
    """Max relative error of parameter gradients against central differences.

    ``loss_fn(tape)`` builds a scalar loss after every set in ``param_sets``
    has been bound (``tape`` is None during the finite-difference passes).
    ``coords`` entries of every parameter tensor are checked, drawn at
    random; pass ``coords=None`` to check every entry.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    rng = np.random.default_rng(0) if rng is None else rng
    tape = Tape()
    for ps in param_sets:
        ps.bind(tape)
    tape.backward(loss_fn(tape))
    grads = {}
    for ps in param_sets:
        grads.update(ps.gradients(tape))

    def value():
        for ps in param_sets:
            ps.bind(None)
        return float(loss_fn(None).value)

    worst = 0.0
    for ps in param_sets:
        for p in ps:
            flat = p.value.reshape(-1)
            idx = np.arange(flat.size) if coords is None else rng.choice(flat.size, min(coords, flat.size), replace=False)
            g = grads[p.name].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = value()
                flat[i] = orig - h
                fm = value()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                worst = max(worst, abs(g[i] - num) / max(abs(g[i]), abs(num), floor))
    return worst
