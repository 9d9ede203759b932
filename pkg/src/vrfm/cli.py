"""``vrfm`` command line: train, sample, evaluate, ambiguity, reproduce.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or
numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import distributions as D
from . import pipeline as P
from .config import SCHEMA, ConfigError, ExperimentConfig, canonical_json, load_config
from .evaluation import write_samples_csv
from .ode import MaxNFEExceeded, ModelField, SolverConfig, SolverError, draw_latents, integrate, write_trajectories_csv
from .training import CheckpointError, TrainingAborted, load_checkpoint

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

logger = logging.getLogger("vrfm")


class UsageError(Exception):
    pass


def _load_cfg(path):
    if path is None:
        return ExperimentConfig()
    try:
        return load_config(path)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None


def _sets_seeds(path):
    if path is None:
        return False
    with open(path) as f:
        return "seeds" in json.load(f)


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except OSError as e:
        raise UsageError(f"cannot read checkpoint {path}: {e.strerror}") from None
    except CheckpointError as e:
        raise UsageError(f"{path}: {e}") from None


def _write_json(path, obj):
    Path(path).write_text(canonical_json(obj))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args):
    cfg = _load_cfg(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seeds=[args.seed])
    root = P.output_root(cfg, args.output_root)
    for seed in cfg.seeds:
        path = P.train_cell(cfg, seed, root)
        print(path)
    return EXIT_OK


def _solver_from_args(args):
    if args.adaptive:
        return SolverConfig("dopri5", rtol=args.rtol, atol=args.atol, max_nfe=args.max_nfe)
    return SolverConfig("euler", steps=args.steps)


def cmd_sample(args):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.trajectories < 0 or args.trajectories > args.n:
        raise UsageError("--trajectories must lie in [0, n]")
    ckpt = _load_ckpt(args.checkpoint)
    model, _ = ckpt.build_models()
    source = ckpt.source_spec()
    if source is None:
        raise UsageError("checkpoint carries no source distribution")
    solver = _solver_from_args(args)
    rng = np.random.default_rng(args.seed)
    x0 = D.sample(source, args.n, rng)
    z = draw_latents(model, args.n, rng)
    if z is not None and args.shared_z:
        z = np.repeat(z[:1], args.n, axis=0)
    traj = integrate(ModelField(model, z), x0, solver, record=args.trajectories > 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    final = np.asarray(traj.final) if not isinstance(traj.states, list) else np.stack([s[-1] for s in traj.states])
    write_samples_csv(final, out / "samples.csv")
    if args.trajectories:
        k = args.trajectories
        if isinstance(traj.states, list):
            sub = type(traj)(traj.times[:k], traj.states[:k], traj.nfe[:k])
        else:
            nfe = traj.nfe if np.ndim(traj.nfe) == 0 else np.asarray(traj.nfe)[:k]
            sub = type(traj)(traj.times, traj.states[:, :k], nfe)
        write_trajectories_csv(sub, out / "trajectories.csv")
    nfe = float(np.mean(traj.nfe))
    _write_json(out / "sample.resolved.json", {
        "checkpoint": str(Path(args.checkpoint).resolve()),
        "n": args.n,
        "seed": args.seed,
        "shared_z": bool(args.shared_z),
        "solver": solver.to_dict(),
        "trajectories": args.trajectories,
        "mean_nfe": nfe,
    })
    print(f"mean nfe {nfe:g}")
    return EXIT_OK


def _parse_steps(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        if part == "adaptive":
            out.append(part)
        elif part.isdigit() and int(part) > 0:
            out.append(int(part))
        else:
            raise UsageError(f"--steps entries must be positive integers or 'adaptive', got {part!r}")
    return out


def cmd_evaluate(args):
    if not args.checkpoints:
        raise UsageError("evaluate needs at least one checkpoint")
    cfg = _load_cfg(args.config)
    overrides = {}
    if args.steps:
        overrides["metrics.steps"] = _parse_steps(args.steps)
    if args.n_generated:
        overrides["metrics.n_generated"] = args.n_generated
    if args.n_test:
        overrides["metrics.n_test"] = args.n_test
    cfg = cfg.replace(**overrides)
    ckpts = [_load_ckpt(p) for p in args.checkpoints]
    dims = {c.model_config["data_dim"] for c in ckpts}
    if len(dims) > 1:
        raise UsageError(f"checkpoints mix data dimensions {sorted(dims)}")
    task = "synthetic_1d" if dims == {1} else "synthetic_2d"
    cfg = cfg.replace(task=task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "evaluate.resolved.json", {"config": cfg.to_dict(), "checkpoints": [str(Path(p).resolve()) for p in args.checkpoints]})
    P.evaluate_into(args.checkpoints, cfg, out)
    print(out / "metrics.csv")
    return EXIT_OK


def cmd_ambiguity(args):
    cfg = _load_cfg(args.config)
    overrides = {"task": args.task}
    for key in ("n_per_bin", "min_count", "max_draws"):
        v = getattr(args, key)
        if v is not None:
            overrides[f"ambiguity.{key}"] = v
    if args.source in ("ground-truth", "ground_truth"):
        source = "ground_truth"
    else:
        ckpt = _load_ckpt(args.source)
        dim = ckpt.model_config["data_dim"]
        overrides["task"] = "synthetic_1d" if dim == 1 else "synthetic_2d"
        source = args.source
    cfg = cfg.replace(**overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = P.run_ambiguity(source, cfg, out, seed=args.seed, emit_svg=not args.no_svg)
    _write_json(out / f"{report.source}.resolved.json", {"config": cfg.to_dict(), "source": source, "seed": args.seed,
                                                          "grid": P.ambiguity_grid(cfg).to_dict()})
    masked = int((~report.mask).sum())
    print(f"{report.source}: {report.mask.size - masked} bins, {masked} masked")
    return EXIT_OK


def cmd_reproduce(args):
    cfg = _load_cfg(args.config).replace(task=args.task)
    if args.iterations is not None:
        cfg = cfg.replace(**{"train.iterations": args.iterations})
    seeds = args.seeds or (cfg.seeds if _sets_seeds(args.config) else [0, 1, 2])
    root = P.output_root(cfg, args.output_root)
    P.reproduce(cfg, root, seeds=seeds, jobs=args.jobs, reuse=not args.no_reuse)
    print(root / cfg.task)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _schema_epilog():
    lines = ["config keys (JSON; unknown keys are rejected):"]
    lines += [f"  {k:28s} {v}" for k, v in SCHEMA.items()]
    return "\n".join(lines)


def build_parser():
    p = argparse.ArgumentParser(prog="vrfm", description="Variational and classic rectified flow matching on synthetic data.",
                                epilog=_schema_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one cell per configured seed")
    t.add_argument("--config", help="JSON config (defaults apply when omitted)")
    t.add_argument("--seed", type=int, help="train only this seed")
    t.add_argument("--output-root", help=f"output root (else ${P.OUTPUT_ROOT_ENV}, else config output_dir)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate samples from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--n", type=int, default=1000)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--steps", type=int, default=100, help="Euler steps")
    g.add_argument("--adaptive", action="store_true", help="use adaptive Dopri5")
    s.add_argument("--rtol", type=float, default=1e-5)
    s.add_argument("--atol", type=float, default=1e-5)
    s.add_argument("--max-nfe", type=int, default=100_000)
    s.add_argument("--trajectories", type=int, default=0, help="export the first K trajectories (long-format CSV)")
    s.add_argument("--shared-z", action="store_true", help="one latent draw for all trajectories")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="samples")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="metric sweep over solver settings")
    e.add_argument("checkpoints", nargs="*")
    e.add_argument("--config", help="JSON config supplying metric settings")
    e.add_argument("--steps", help="comma list, e.g. 2,5,10,50,100,adaptive")
    e.add_argument("--n-generated", type=int)
    e.add_argument("--n-test", type=int)
    e.add_argument("--out", default="evaluation")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ambiguity", help="per-bin velocity spread over (x, t)")
    a.add_argument("--source", required=True, help="'ground-truth' or a checkpoint path")
    a.add_argument("--task", choices=("synthetic_1d", "synthetic_2d"), default="synthetic_1d",
                   help="task for the ground truth (checkpoints carry their own)")
    a.add_argument("--config")
    a.add_argument("--n-per-bin", type=int)
    a.add_argument("--min-count", type=int)
    a.add_argument("--max-draws", type=int)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--no-svg", action="store_true")
    a.add_argument("--out", default="ambiguity")
    a.set_defaults(func=cmd_ambiguity)

    r = sub.add_parser("reproduce", help="train rfm and vrfm over seeds, evaluate, analyze")
    r.add_argument("--task", choices=("synthetic_1d", "synthetic_2d"), required=True)
    r.add_argument("--config", help="JSON config overriding defaults")
    r.add_argument("--seeds", type=int, nargs="+")
    r.add_argument("--iterations", type=int, help="override train.iterations")
    r.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    r.add_argument("--no-reuse", action="store_true", help="retrain even when a matching checkpoint exists")
    r.add_argument("--output-root")
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except P.StageFailed as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE if isinstance(e.cause, (UsageError, ConfigError, CheckpointError)) else EXIT_RUNTIME
    except MaxNFEExceeded as e:
        print(f"error: solver exceeded max_nfe={e.max_nfe}", file=sys.stderr)
        return EXIT_RUNTIME
    except (TrainingAborted, SolverError, FloatingPointError, D.InsufficientOccupancy) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
