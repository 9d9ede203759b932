"""Experiment orchestration behind the command line: training cells,
metric sweeps, ambiguity reports and the full reproduction run."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import distributions as D
from . import metrics as M
from . import svg
from .config import ExperimentConfig, canonical_json
from .evaluation import aggregate_rows, evaluate_checkpoint
from .ode import ModelField, SolverConfig, draw_latents, integrate_euler, sample, write_trajectories_csv
from .training import load_checkpoint, save_checkpoint, train, write_loss_csv

__all__ = [
    "OUTPUT_ROOT_ENV",
    "StageFailed",
    "output_root",
    "cell_dir",
    "train_cell",
    "run_ambiguity",
    "export_crossing_trajectories",
    "reproduce",
]

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "VRFM_OUTPUT_ROOT"
N_CROSSING_TRAJECTORIES = 200
CROSSING_STEPS = 100
DONE_MARKER = "reproduce.done"


class StageFailed(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def output_root(cfg: ExperimentConfig, override=None) -> Path:
    """``override`` beats the environment variable, which beats the config."""
    if override:
        return Path(override)
    env = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(env) if env else Path(cfg["output_dir"])


def cell_dir(root, task, objective, seed) -> Path:
    return Path(root) / task / objective / str(seed)


def train_cell(cfg: ExperimentConfig, seed: int, root, reuse=False):
    """Train one (objective, seed) cell into ``root/<task>/<objective>/<seed>``.

    With ``reuse`` an existing checkpoint whose resolved config matches is
    kept as is; training is deterministic, so this gives the same bytes.
    """
    out = cell_dir(root, cfg.task, cfg.objective, seed)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = canonical_json(cfg.replace(seeds=[seed]).to_dict())
    ckpt_path = out / "model.ckpt"
    cfg_path = out / "config.resolved.json"
    if reuse and ckpt_path.exists() and (out / "loss.csv").exists() and cfg_path.exists():
        if cfg_path.read_text() == snapshot:
            logger.info("reusing %s", ckpt_path)
            return ckpt_path
    cfg_path.write_text(snapshot)
    source, target = cfg.specs()

    def progress(rec):
        logger.info("%s seed %d iter %d total %.5f", cfg.objective, seed, rec.iteration, rec.total)

    ckpt, history = train(source, target, cfg.model_config(), cfg.posterior_config(), cfg.train_config(seed), progress)
    save_checkpoint(ckpt, ckpt_path)
    write_loss_csv(history, out / "loss.csv")
    return ckpt_path


def _train_job(args):
    cfg_json, seed, root, reuse = args
    logging.basicConfig(level=logging.INFO)
    return str(train_cell(ExperimentConfig.from_json(cfg_json), seed, root, reuse))


def ambiguity_grid(cfg: ExperimentConfig):
    a = cfg["ambiguity"]
    return M.AmbiguityGrid(min_count=a["min_count"], max_draws=a["max_draws"])


def run_ambiguity(source, cfg: ExperimentConfig, out_dir, seed=0, grid=None, emit_svg=True):
    """``source`` is ``"ground_truth"`` or a checkpoint path. Writes
    ``<tag>_grid.csv``, ``<tag>_histograms.csv`` and optionally an SVG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = grid or ambiguity_grid(cfg)
    rng = np.random.default_rng([seed, 11])
    n = cfg["ambiguity"]["n_per_bin"]
    if source == "ground_truth":
        report = M.ambiguity_map("ground_truth", grid, n, rng, specs=cfg.specs())
    else:
        model, _ = load_checkpoint(source).build_models()
        report = M.ambiguity_map(model, grid, n, rng)
    report.write_grid_csv(out_dir / f"{report.source}_grid.csv")
    report.write_histograms_csv(out_dir / f"{report.source}_histograms.csv")
    if emit_svg:
        (out_dir / f"{report.source}_std.svg").write_text(
            svg.heatmap_svg(report.std, report.x_centers, report.t_centers, f"velocity std: {report.source}")
        )
    return report


def export_crossing_trajectories(ckpt_paths: dict, out_dir, n=N_CROSSING_TRAJECTORIES, steps=CROSSING_STEPS, seed=0):
    """Euler paths for each checkpoint from one shared set of source starts.

    Writes ``trajectories_<objective>.csv`` and returns ``{objective: paths}``
    with paths shaped (n, steps + 1, d).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    x0 = None
    for objective, path in ckpt_paths.items():
        ckpt = load_checkpoint(path)
        model, _ = ckpt.build_models()
        if x0 is None:
            x0 = D.sample(ckpt.source_spec(), n, np.random.default_rng([seed, 21]))
        z = draw_latents(model, n, np.random.default_rng([seed, 22]))
        traj = integrate_euler(ModelField(model, z), x0, steps, record=True)
        write_trajectories_csv(traj, out_dir / f"trajectories_{objective}.csv")
        results[objective] = np.transpose(traj.states, (1, 0, 2))
    return results


def _metric_svgs(rows, dim, out_dir):
    agg = {}
    for r in rows:
        if r.seed in ("mean", "std"):
            agg.setdefault((r.method, r.seed), []).append(r)
    keys = [("true_ll", "true log-likelihood"), ("parzen_ll", "Parzen log-likelihood"),
            ("wasserstein", "sliced W1" if dim > 1 else "W1")]
    for key, label in keys:
        series = {}
        for method in ("rfm", "vrfm"):
            means = agg.get((method, "mean"), [])
            stds = {r.steps: r for r in agg.get((method, "std"), [])}
            if not means:
                continue
            nfe = [m.nfe for m in means]
            series[method] = (nfe, [getattr(m, key) for m in means], [getattr(stds[m.steps], key) for m in means])
        if series:
            (out_dir / f"{key}_vs_nfe.svg").write_text(svg.line_svg(series, label, "NFE", label, log_x=True))


def _summary_csv(rows, path):
    keys = M.METRIC_HEADER[3:]
    means = {(r.method, r.steps): r for r in rows if r.seed == "mean"}
    stds = {(r.method, r.steps): r for r in rows if r.seed == "std"}
    with open(path, "w") as fh:
        fh.write("method,steps," + ",".join(f"{k}_mean,{k}_std" for k in keys) + "\n")
        for key, m in means.items():
            s = stds[key]
            vals = ",".join(f"{getattr(m, k)!r},{getattr(s, k)!r}" for k in keys)
            fh.write(f"{m.method},{m.steps},{vals}\n")


def _stage(name, fn, *args, **kwargs):
    logger.info("stage %s", name)
    try:
        return fn(*args, **kwargs)
    except StageFailed:
        raise
    except Exception as e:  # noqa: BLE001 - re-raised with the stage name
        raise StageFailed(name, e) from e


def evaluate_into(ckpt_paths, cfg: ExperimentConfig, out_dir, sample_dirs=None):
    """Metric sweep for every checkpoint, aggregate rows, CSV and SVG output."""
    out_dir = Path(out_dir)
    m = cfg["metrics"]
    adaptive = cfg.solver("adaptive")
    rows = []
    for i, p in enumerate(ckpt_paths):
        ckpt = load_checkpoint(p)
        sink = None
        if sample_dirs is not None:
            sink = Path(sample_dirs[i])

        def progress(row):
            logger.info("eval %s seed %s steps %s true_ll %.4f nfe %.1f", row.method, row.seed, row.steps,
                        row.true_ll, row.nfe)

        rows.extend(
            evaluate_checkpoint(ckpt, steps=m["steps"], n_generated=m["n_generated"], n_test=m["n_test"],
                                adaptive=adaptive, n_projections=m["n_projections"], val_fraction=m["val_fraction"],
                                progress=progress, sample_dir=sink)
        )
    rows = aggregate_rows(rows)
    M.write_metric_rows(rows, out_dir / "metrics.csv")
    _summary_csv(rows, out_dir / "summary.csv")
    _metric_svgs(rows, cfg.dim, out_dir)
    return rows


def reproduce(cfg: ExperimentConfig, root, seeds=(0, 1, 2), jobs=1, reuse=True):
    """Train rfm and vrfm for every seed, then evaluate and analyze.

    Layout under ``root/<task>/``: ``<objective>/<seed>/`` training cells,
    ``metrics.csv``, ``summary.csv``, metric SVGs, ``ambiguity/`` reports
    and, for the 2D task, ``trajectories/`` with crossing-test exports.
    """
    root = Path(root)
    task_dir = root / cfg.task
    task_dir.mkdir(parents=True, exist_ok=True)
    (task_dir / "config.resolved.json").write_text(canonical_json(cfg.replace(seeds=list(seeds)).to_dict()))
    cells = [(cfg.replace(objective=obj, **{"model.latent_dim": None}), s) for obj in ("rfm", "vrfm") for s in seeds]

    def train_all():
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                args = [(c.to_json(), s, str(root), reuse) for c, s in cells]
                return [Path(p) for p in ex.map(_train_job, args)]
        return [train_cell(c, s, root, reuse) for c, s in cells]

    ckpts = _stage("train", train_all)
    dirs = [p.parent for p in ckpts]
    rows = _stage("evaluate", evaluate_into, ckpts, cfg, task_dir, dirs)

    amb_dir = task_dir / "ambiguity"
    first = {obj: cell_dir(root, cfg.task, obj, seeds[0]) / "model.ckpt" for obj in ("rfm", "vrfm")}
    reports = {"ground_truth": _stage("ambiguity:ground_truth", run_ambiguity, "ground_truth", cfg, amb_dir, seeds[0])}
    for obj, p in first.items():
        rep = _stage(f"ambiguity:{obj}", run_ambiguity, p, cfg, amb_dir, seeds[0])
        reports[rep.source] = rep
    corr = {
        tag: M.ambiguity_correlation(rep, reports["ground_truth"]) if tag == "model_vrfm" else None
        for tag, rep in reports.items()
    }
    (amb_dir / "summary.json").write_text(json.dumps({"pearson_r_vs_ground_truth": corr}, sort_keys=True, indent=2) + "\n")

    if cfg.dim == 2:
        paths = _stage("trajectories", export_crossing_trajectories, first, task_dir / "trajectories", seed=seeds[0])
        counts = {obj: len(M.crossing_pairs(p)) for obj, p in paths.items()}
        (task_dir / "trajectories" / "crossings.json").write_text(json.dumps(counts, sort_keys=True, indent=2) + "\n")
        for obj, p in paths.items():
            (task_dir / "trajectories" / f"paths_{obj}.svg").write_text(svg.paths_svg(p, f"{obj} Euler paths"))
        src, tgt = cfg.specs()
        rng = np.random.default_rng([seeds[0], 31])
        gen = {}
        for obj, p in first.items():
            model, _ = load_checkpoint(p).build_models()
            gen[obj], _ = sample(model, src, 2000, SolverConfig("euler", steps=5), rng)
        gen["target"] = D.sample(tgt, 2000, rng)
        (task_dir / "samples_5_steps.svg").write_text(svg.scatter_svg(gen, "5 Euler steps"))
    # written last: its presence means every stage above finished
    (task_dir / DONE_MARKER).write_text((task_dir / "config.resolved.json").read_text())
    return rows
