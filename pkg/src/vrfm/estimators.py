"""Scikit-learn style density estimators.

``fit(X)`` learns a flow from a standard normal to the empirical
distribution of ``X``; ``sample`` and ``score_samples`` mirror
``sklearn.neighbors.KernelDensity``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from . import distributions as D
from .models import PosteriorConfig, VelocityModelConfig
from .ode import SolverConfig, log_likelihood, sample
from .training import Checkpoint, TrainConfig, train

__all__ = ["RectifiedFlowMatching", "VariationalRectifiedFlowMatching"]


def _solver(steps, rtol, atol):
    if steps == "adaptive":
        return SolverConfig("dopri5", rtol=rtol, atol=atol)
    return SolverConfig("euler", steps=int(steps))


def _seed(random_state):
    if random_state is None or isinstance(random_state, (int, np.integer)):
        return None if random_state is None else int(random_state)
    raise ValueError("random_state must be an int or None for reproducible training")


class _FlowEstimator(BaseEstimator):
    _objective = None

    def _model_config(self, dim):
        raise NotImplementedError

    def _posterior_config(self, dim):
        return None

    def _kl_weight(self):
        return 0.0

    def fit(self, X, y=None):
        """Train on target samples ``X`` of shape (n_samples, n_features)."""
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        dim = X.shape[1]
        seed = _seed(self.random_state)
        if seed is None:
            seed = int(np.random.SeedSequence().generate_state(1)[0])
        cfg = TrainConfig(
            objective=self._objective,
            iterations=self.max_iter,
            batch_size=self.batch_size,
            lr=self.learning_rate,
            kl_weight=self._kl_weight(),
            weight_decay=self.weight_decay,
            seed=seed,
            log_every=max(1, min(100, self.max_iter)),
        )
        self.source_ = D.gaussian(np.zeros(dim), 1.0)
        ckpt, history = train(self.source_, X, self._model_config(dim), self._posterior_config(dim), cfg)
        self.checkpoint_: Checkpoint = ckpt
        self.model_, _ = ckpt.build_models()
        self.loss_curve_ = np.array([r.total for r in history])
        self.n_features_in_ = dim
        return self

    def sample(self, n_samples=1, random_state=None):
        """Draw ``n_samples`` by integrating the learned flow."""
        check_is_fitted(self, "model_")
        rng = np.random.default_rng(check_random_state(random_state).randint(2**31))
        x, _ = sample(self.model_, self.source_, n_samples, _solver(self.steps, self.rtol, self.atol), rng)
        return x

    def score_samples(self, X):
        """Model log-density of each row of ``X`` via the change of variables."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return np.atleast_1d(self._log_likelihood(X))

    def score(self, X, y=None):
        return float(np.sum(self.score_samples(X)))

    def _log_likelihood(self, X):
        solver = SolverConfig("dopri5", rtol=self.rtol, atol=self.atol)
        return log_likelihood(self.model_, self.source_, X, solver=solver)


class RectifiedFlowMatching(_FlowEstimator):
    """Classic rectified flow: a deterministic velocity ``v(x_t, t)``."""

    _objective = "rfm"

    def __init__(
        self,
        hidden_dim=64,
        max_iter=20000,
        batch_size=1000,
        learning_rate=1e-3,
        weight_decay=0.01,
        steps="adaptive",
        rtol=1e-5,
        atol=1e-5,
        random_state=None,
    ):
        self.hidden_dim = hidden_dim
        self.max_iter = max_iter
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.steps = steps
        self.rtol = rtol
        self.atol = atol
        self.random_state = random_state

    def _model_config(self, dim):
        return VelocityModelConfig(data_dim=dim, hidden_dim=self.hidden_dim)


class VariationalRectifiedFlowMatching(_FlowEstimator):
    """Latent-conditioned velocity ``v(x_t, t, z)`` trained with a posterior encoder.

    ``score_samples`` marginalizes ``z`` by a log-mean-exp over
    ``n_latent_samples`` prior draws seeded from ``random_state``.
    """

    _objective = "vrfm"

    def __init__(
        self,
        latent_dim=4,
        kl_weight=1.0,
        conditioning=("x0", "x1", "xt"),
        hidden_dim=64,
        max_iter=20000,
        batch_size=1000,
        learning_rate=1e-3,
        weight_decay=0.01,
        steps="adaptive",
        rtol=1e-5,
        atol=1e-5,
        n_latent_samples=16,
        random_state=None,
    ):
        self.latent_dim = latent_dim
        self.kl_weight = kl_weight
        self.conditioning = conditioning
        self.hidden_dim = hidden_dim
        self.max_iter = max_iter
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.steps = steps
        self.rtol = rtol
        self.atol = atol
        self.n_latent_samples = n_latent_samples
        self.random_state = random_state

    def _model_config(self, dim):
        return VelocityModelConfig(data_dim=dim, hidden_dim=self.hidden_dim, latent_dim=self.latent_dim)

    def _posterior_config(self, dim):
        return PosteriorConfig(
            latent_dim=self.latent_dim, data_dim=dim, conditioning=tuple(self.conditioning), hidden_dim=self.hidden_dim
        )

    def _kl_weight(self):
        return self.kl_weight

    def _log_likelihood(self, X):
        solver = SolverConfig("dopri5", rtol=self.rtol, atol=self.atol)
        rng = np.random.default_rng(check_random_state(self.random_state).randint(2**31))
        return log_likelihood(
            self.model_, self.source_, X, solver=solver, z_policy="mc_marginal", rng=rng, n_latent=self.n_latent_samples
        )
