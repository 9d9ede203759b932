"""Experiment configuration: a single JSON document with strict keys.

Every field has a default. ``null`` for a task-dependent field (latent size,
KL weight, mode std) resolves to the task default, so a resolved config is
fully explicit and re-serializes to the same canonical bytes.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from . import distributions as D
from .models import CONDITIONING_INPUTS, PosteriorConfig, VelocityModelConfig
from .ode import SolverConfig
from .training import OBJECTIVES, TrainConfig

__all__ = [
    "ConfigError",
    "TASKS",
    "DEFAULTS",
    "SCHEMA",
    "ExperimentConfig",
    "load_config",
    "canonical_json",
]

TASKS = ("synthetic_1d", "synthetic_2d")

# per-task values the architecture and objective depend on
TASK_DEFAULTS = {
    "synthetic_1d": {"dim": 1, "latent_dim": 4, "kl_weight": 1.0, "mode_std": 0.15},
    "synthetic_2d": {"dim": 2, "latent_dim": 8, "kl_weight": 0.1, "mode_std": 0.1},
}

DEFAULTS = {
    "task": "synthetic_1d",
    "objective": "vrfm",
    "seeds": [0],
    "output_dir": "out",
    "data": {"mode_std": None},
    "model": {
        "hidden_dim": 64,
        "embed_dim": 64,
        "latent_dim": None,
        "latent_hidden": 128,
        "decoder_layers": 4,
        "max_period": 10000.0,
    },
    "posterior": {
        "conditioning": ["x0", "x1", "xt"],
        "hidden_dim": 64,
        "embed_dim": 64,
        "max_period": 10000.0,
    },
    "train": {
        "iterations": 20000,
        "batch_size": 1000,
        "lr": 0.001,
        "kl_weight": None,
        "weight_decay": 0.01,
        "log_every": 100,
    },
    "solver": {"rtol": 1e-5, "atol": 1e-5, "h0": 0.01, "max_nfe": 100000},
    "metrics": {
        "steps": [2, 5, 10, 50, 100, "adaptive"],
        "n_generated": 10000,
        "n_test": 10000,
        "n_projections": 256,
        "val_fraction": 0.1,
    },
    "ambiguity": {
        "n_per_bin": 200,
        "min_count": 100,
        "max_draws": 10000000,
    },
}

# one-line descriptions, published through ``vrfm-cli --help`` and the README
SCHEMA = {
    "task": "synthetic_1d | synthetic_2d",
    "objective": "rfm | vrfm",
    "seeds": "list of non-negative integer training seeds",
    "output_dir": "output root; the VRFM_OUTPUT_ROOT env var overrides it",
    "data.mode_std": "target component std; null = task default (0.15 in 1D, 0.1 in 2D)",
    "model.hidden_dim": "width of encoders and decoder",
    "model.embed_dim": "sinusoidal embedding size per input coordinate (even)",
    "model.latent_dim": "latent size for vrfm; null = 4 in 1D, 8 in 2D; forced to 0 for rfm",
    "model.latent_hidden": "width of the three-layer latent branch",
    "model.decoder_layers": "number of linear layers in the decoder",
    "model.max_period": "longest sinusoid period",
    "posterior.conditioning": "non-empty subset of x0, x1, xt, t",
    "posterior.hidden_dim": "posterior encoder width",
    "posterior.embed_dim": "posterior sinusoidal embedding size (even)",
    "posterior.max_period": "posterior longest sinusoid period",
    "train.iterations": "optimizer steps",
    "train.batch_size": "couplings per step",
    "train.lr": "AdamW learning rate",
    "train.kl_weight": "KL weight beta; null = 1.0 in 1D, 0.1 in 2D",
    "train.weight_decay": "AdamW decoupled weight decay",
    "train.log_every": "loss history window",
    "solver.rtol": "Dopri5 relative tolerance",
    "solver.atol": "Dopri5 absolute tolerance",
    "solver.h0": "Dopri5 initial step",
    "solver.max_nfe": "Dopri5 evaluation cap per trajectory",
    "metrics.steps": "Euler step counts and/or \"adaptive\"",
    "metrics.n_generated": "generated samples per metric row",
    "metrics.n_test": "held-out target samples per metric row",
    "metrics.n_projections": "sliced Wasserstein directions (2D)",
    "metrics.val_fraction": "share of generated samples used to pick the Parzen bandwidth",
    "ambiguity.n_per_bin": "velocity samples per bin",
    "ambiguity.min_count": "bins with fewer kept samples are masked",
    "ambiguity.max_draws": "rejection-sampling budget per bin",
}


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted key path."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _merge(defaults, given, path=""):
    if not isinstance(given, dict):
        raise ConfigError(path, f"expected an object, got {type(given).__name__}")
    out = {}
    for key in given:
        if key not in defaults:
            where = f"{path}.{key}" if path else key
            raise ConfigError(where, "unknown key")
    for key, default in defaults.items():
        where = f"{path}.{key}" if path else key
        if key not in given:
            out[key] = copy.deepcopy(default)
        elif isinstance(default, dict):
            out[key] = _merge(default, given[key], where)
        else:
            out[key] = copy.deepcopy(given[key])
    return out


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check(cond, path, msg):
    if not cond:
        raise ConfigError(path, msg)


def _validate(d):
    _check(d["task"] in TASKS, "task", f"must be one of {list(TASKS)}, got {d['task']!r}")
    _check(d["objective"] in OBJECTIVES, "objective", f"must be one of {list(OBJECTIVES)}, got {d['objective']!r}")
    seeds = d["seeds"]
    _check(isinstance(seeds, list) and seeds, "seeds", "must be a non-empty list")
    for i, s in enumerate(seeds):
        _check(_is_int(s) and s >= 0, f"seeds[{i}]", "must be a non-negative integer")
    _check(len(set(seeds)) == len(seeds), "seeds", "must not repeat")
    _check(isinstance(d["output_dir"], str) and d["output_dir"], "output_dir", "must be a non-empty string")

    ms = d["data"]["mode_std"]
    _check(ms is None or (_is_num(ms) and ms > 0), "data.mode_std", "must be positive or null")

    ints = [
        ("model", "hidden_dim", 1), ("model", "embed_dim", 2), ("model", "latent_hidden", 1),
        ("model", "decoder_layers", 1), ("posterior", "hidden_dim", 1), ("posterior", "embed_dim", 2),
        ("train", "iterations", 1), ("train", "batch_size", 1), ("train", "log_every", 1),
        ("solver", "max_nfe", 1), ("metrics", "n_generated", 2), ("metrics", "n_test", 1),
        ("metrics", "n_projections", 1), ("ambiguity", "n_per_bin", 2), ("ambiguity", "min_count", 2),
        ("ambiguity", "max_draws", 1),
    ]
    for sec, key, lo in ints:
        v = d[sec][key]
        _check(_is_int(v) and v >= lo, f"{sec}.{key}", f"must be an integer >= {lo}, got {v!r}")
    for sec in ("model", "posterior"):
        _check(d[sec]["embed_dim"] % 2 == 0, f"{sec}.embed_dim", "must be even")
    ld = d["model"]["latent_dim"]
    _check(ld is None or (_is_int(ld) and ld >= 0), "model.latent_dim", "must be a non-negative integer or null")
    if d["objective"] == "vrfm" and ld is not None:
        _check(ld >= 1, "model.latent_dim", "vrfm needs latent_dim >= 1")

    pos = [
        ("model", "max_period"), ("posterior", "max_period"), ("train", "lr"),
        ("solver", "rtol"), ("solver", "atol"), ("solver", "h0"),
    ]
    for sec, key in pos:
        v = d[sec][key]
        _check(_is_num(v) and v > 0, f"{sec}.{key}", f"must be a positive number, got {v!r}")
    wd = d["train"]["weight_decay"]
    _check(_is_num(wd) and wd >= 0, "train.weight_decay", "must be >= 0")
    kw = d["train"]["kl_weight"]
    _check(kw is None or (_is_num(kw) and kw >= 0), "train.kl_weight", "must be >= 0 or null")
    vf = d["metrics"]["val_fraction"]
    _check(_is_num(vf) and 0 < vf < 1, "metrics.val_fraction", "must lie in (0, 1)")

    cond = d["posterior"]["conditioning"]
    _check(isinstance(cond, list) and cond, "posterior.conditioning", "must be a non-empty list")
    for i, c in enumerate(cond):
        _check(c in CONDITIONING_INPUTS, f"posterior.conditioning[{i}]", f"must be one of {list(CONDITIONING_INPUTS)}")
    _check(len(set(cond)) == len(cond), "posterior.conditioning", "must not repeat")

    steps = d["metrics"]["steps"]
    _check(isinstance(steps, list) and steps, "metrics.steps", "must be a non-empty list")
    for i, s in enumerate(steps):
        _check(s == "adaptive" or (_is_int(s) and s >= 1), f"metrics.steps[{i}]", "must be a positive integer or \"adaptive\"")


def _resolve(d):
    """Fill task-dependent nulls and canonicalize list orders."""
    td = TASK_DEFAULTS[d["task"]]
    if d["data"]["mode_std"] is None:
        d["data"]["mode_std"] = td["mode_std"]
    if d["objective"] == "rfm":
        d["model"]["latent_dim"] = 0
    elif d["model"]["latent_dim"] is None:
        d["model"]["latent_dim"] = td["latent_dim"]
    if d["train"]["kl_weight"] is None:
        d["train"]["kl_weight"] = td["kl_weight"]
    d["posterior"]["conditioning"] = [c for c in CONDITIONING_INPUTS if c in d["posterior"]["conditioning"]]
    for sec, key in (("model", "max_period"), ("posterior", "max_period"), ("train", "lr"), ("train", "kl_weight"),
                     ("train", "weight_decay"), ("solver", "rtol"), ("solver", "atol"), ("solver", "h0"),
                     ("data", "mode_std"), ("metrics", "val_fraction")):
        d[sec][key] = float(d[sec][key])
    return d


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


class ExperimentConfig:
    """Validated, fully resolved experiment settings."""

    def __init__(self, data: dict | None = None):
        d = _merge(DEFAULTS, {} if data is None else data)
        _validate(d)
        self._raw = copy.deepcopy(d)  # nulls kept, so replace() re-resolves them
        self._d = _resolve(d)

    @classmethod
    def from_json(cls, text):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError("", f"invalid JSON: {e}") from None
        return cls(raw)

    def to_dict(self):
        return copy.deepcopy(self._d)

    def to_json(self):
        return canonical_json(self._d)

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self._d == other._d

    def __getitem__(self, key):
        return self._d[key]

    def replace(self, **changes):
        """Copy with top-level or dotted-key overrides, e.g. ``{"train.iterations": 10}``.

        Task-dependent keys left null in the original follow the new task.
        """
        d = copy.deepcopy(self._raw)
        for key, value in changes.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(key, "unknown key")
            node[parts[-1]] = value
        return ExperimentConfig(d)

    @property
    def task(self):
        return self._d["task"]

    @property
    def objective(self):
        return self._d["objective"]

    @property
    def dim(self):
        return TASK_DEFAULTS[self.task]["dim"]

    @property
    def seeds(self):
        return list(self._d["seeds"])

    def specs(self):
        ms = self._d["data"]["mode_std"]
        if self.dim == 1:
            return D.builtin_spec("source_1d"), D.builtin_spec("target_1d_bimodal", mode_std=ms)
        return D.builtin_spec("source_2d_circle"), D.builtin_spec("target_2d_circle", mode_std=ms)

    def model_config(self):
        m = self._d["model"]
        return VelocityModelConfig(data_dim=self.dim, **m)

    def posterior_config(self):
        if self.objective != "vrfm":
            return None
        p = self._d["posterior"]
        return PosteriorConfig(latent_dim=self._d["model"]["latent_dim"], data_dim=self.dim,
                               conditioning=tuple(p["conditioning"]), hidden_dim=p["hidden_dim"],
                               embed_dim=p["embed_dim"], max_period=p["max_period"])

    def train_config(self, seed):
        t = self._d["train"]
        return TrainConfig(objective=self.objective, seed=seed, **t)

    def solver(self, steps):
        s = self._d["solver"]
        if steps == "adaptive":
            return SolverConfig("dopri5", rtol=s["rtol"], atol=s["atol"], h0=s["h0"], max_nfe=s["max_nfe"])
        return SolverConfig("euler", steps=int(steps))


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_json(Path(path).read_text())
