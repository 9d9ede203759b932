"""Losses, the training loop and checkpoint persistence."""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .distributions import CouplingBatch, DistributionSpec, sample_coupling
from .models import (
    PosteriorConfig,
    PosteriorEncoder,
    VelocityModel,
    VelocityModelConfig,
    bind_on,
    kl_nodes,
    reparameterize,
)
from .nn import AdamW, Tape
from .nn import tape as T

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "TrainingAborted",
    "CheckpointError",
    "NotACheckpoint",
    "UnsupportedVersion",
    "TruncatedCheckpoint",
    "rfm_loss",
    "vrfm_loss",
    "rfm_loss_node",
    "vrfm_loss_nodes",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
]

logger = logging.getLogger(__name__)

MAGIC = b"VRFMCKPT"
FORMAT_VERSION = 1
OBJECTIVES = ("rfm", "vrfm")


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "vrfm"
    iterations: int = 20_000
    batch_size: int = 1000
    lr: float = 1e-3
    kl_weight: float = 1.0
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.iterations < 1 or self.batch_size < 1 or self.log_every < 1:
            raise ValueError("iterations, batch_size and log_every must be >= 1")

    def to_dict(self):
        return asdict(self)


class TrainingAborted(RuntimeError):
    def __init__(self, iteration, last_finite):
        super().__init__(f"non-finite loss at iteration {iteration}; last finite losses {last_finite}")
        self.iteration = iteration
        self.last_finite = last_finite


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _batch_nodes(batch: CouplingBatch):
    return {
        "x0": T.constant(batch.x0),
        "x1": T.constant(batch.x1),
        "xt": T.constant(batch.xt),
        "t": T.constant(batch.t.reshape(-1, 1)),
    }


def _sq_error(pred, target):
    return T.mean(T.sum(T.square(T.sub(pred, T.constant(target))), axis=-1))


def rfm_loss_node(model: VelocityModel, batch: CouplingBatch, tape: Tape | None = None):
    if model.latent_dim != 0:
        raise ValueError("rfm loss needs a baseline model (latent_dim=0)")
    bind_on(tape, model)
    b = _batch_nodes(batch)
    return _sq_error(model.forward(b["xt"], b["t"]), batch.v)


def rfm_loss(model: VelocityModel, batch: CouplingBatch) -> float:
    """Mean squared norm of ``v(xt, t) - (x1 - x0)``."""
    return float(rfm_loss_node(model, batch).value)


def vrfm_loss_nodes(model, encoder, batch, beta, rng=None, tape=None, eps=None):
    """``(recon, kl, total)`` nodes of the single-sample variational objective."""
    if model.latent_dim < 1:
        raise ValueError("vrfm loss needs a latent model (latent_dim >= 1)")
    if encoder.latent_dim != model.latent_dim:
        raise ValueError(f"latent dim mismatch: model {model.latent_dim}, encoder {encoder.latent_dim}")
    if encoder.config.data_dim != model.config.data_dim:
        raise ValueError("data dim mismatch between model and encoder")
    bind_on(tape, model, encoder)
    b = _batch_nodes(batch)
    mu, log_sigma = encoder.forward(b)
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    z = reparameterize(mu, log_sigma, eps)
    recon = _sq_error(model.forward(b["xt"], b["t"], z), batch.v)
    kl = T.mean(kl_nodes(mu, log_sigma))
    total = T.add(recon, T.scale(kl, beta)) if beta else recon
    return recon, kl, total


def vrfm_loss(model, encoder, batch, beta, rng):
    """Reconstruction, KL and ``recon + beta * kl`` as floats."""
    recon, kl, total = vrfm_loss_nodes(model, encoder, batch, beta, rng)
    return float(recon.value), float(kl.value), float(total.value)


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    objective: str
    model_config: dict
    train_config: dict
    params: dict
    posterior_config: dict | None = None
    final_losses: dict = field(default_factory=dict)
    seed: int = 0
    source: dict | None = None
    target: dict | None = None
    format_version: int = FORMAT_VERSION

    def build_models(self):
        model = VelocityModel(VelocityModelConfig(**self.model_config), seed=0)
        model.params.load_state({k: v for k, v in self.params.items() if k in set(model.params.names())})
        encoder = None
        if self.posterior_config is not None:
            pc = dict(self.posterior_config)
            pc["conditioning"] = tuple(pc["conditioning"])
            encoder = PosteriorEncoder(PosteriorConfig(**pc), seed=0)
            encoder.params.load_state({k: v for k, v in self.params.items() if k in set(encoder.params.names())})
        return model, encoder

    def source_spec(self):
        return None if self.source is None else DistributionSpec.from_dict(self.source)

    def target_spec(self):
        return None if self.target is None else DistributionSpec.from_dict(self.target)

    def metadata(self):
        return {
            "format_version": self.format_version,
            "objective": self.objective,
            "model_config": self.model_config,
            "posterior_config": self.posterior_config,
            "train_config": self.train_config,
            "final_losses": self.final_losses,
            "seed": self.seed,
            "source": self.source,
            "target": self.target,
            "param_names": list(self.params),
        }


class CheckpointError(ValueError):
    pass


class NotACheckpoint(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.format_version))
    meta = json.dumps(ckpt.metadata(), sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path):
    data = checkpoint_bytes(ckpt)
    with open(path, "wb") as f:
        f.write(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpoint(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise NotACheckpoint("not a checkpoint: bad magic bytes")
    r.take(len(MAGIC), "magic")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"unsupported version {version} (expected {FORMAT_VERSION})")
    (meta_len,) = r.unpack("<Q", "metadata length")
    meta = json.loads(r.take(meta_len, "metadata").decode())
    params = {}
    for expected in meta["param_names"]:
        (name_len,) = r.unpack("<H", "parameter name length")
        name = r.take(name_len, "parameter name").decode()
        if name != expected:
            raise CheckpointError(f"parameter order mismatch: expected {expected!r}, found {name!r}")
        (rank,) = r.unpack("<I", f"rank of {name}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        count = int(np.prod(dims)) if rank else 1
        raw = r.take(8 * count, f"values of {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last parameter")
    return Checkpoint(
        objective=meta["objective"],
        model_config=meta["model_config"],
        train_config=meta["train_config"],
        params=params,
        posterior_config=meta["posterior_config"],
        final_losses=meta["final_losses"],
        seed=meta["seed"],
        source=meta["source"],
        target=meta["target"],
        format_version=meta["format_version"],
    )


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class LossRecord:
    iteration: int
    recon: float
    kl: float
    total: float

    def __post_init__(self):
        self.recon, self.kl, self.total = float(self.recon), float(self.kl), float(self.total)


def _spec_dict(x):
    return x.to_dict() if isinstance(x, DistributionSpec) else None


def train(source, target, model_cfg: VelocityModelConfig, posterior_cfg, train_cfg: TrainConfig, progress=None):
    """Fixed-budget training; returns ``(Checkpoint, history)``.

    ``history`` holds one :class:`LossRecord` per ``log_every`` iterations
    with losses averaged over that window. Fully deterministic given
    ``train_cfg.seed``.
    """
    vrfm = train_cfg.objective == "vrfm"
    if vrfm and posterior_cfg is None:
        raise ValueError("objective 'vrfm' requires a posterior config")
    if vrfm and model_cfg.latent_dim < 1:
        raise ValueError("objective 'vrfm' requires model latent_dim >= 1")
    if not vrfm and model_cfg.latent_dim != 0:
        raise ValueError("objective 'rfm' requires model latent_dim == 0")

    init_seq, data_seq, noise_seq = np.random.SeedSequence(train_cfg.seed).spawn(3)
    init_rng = np.random.default_rng(init_seq)
    data_rng = np.random.default_rng(data_seq)
    noise_rng = np.random.default_rng(noise_seq)

    model = VelocityModel(model_cfg, rng=init_rng)
    encoder = PosteriorEncoder(posterior_cfg, rng=init_rng) if vrfm else None
    all_params = list(model.params) + (list(encoder.params) if encoder else [])
    opt = AdamW(all_params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)

    history = []
    window = np.zeros(3)
    window_n = 0
    last_finite = None
    for it in range(1, train_cfg.iterations + 1):
        batch = sample_coupling(source, target, train_cfg.batch_size, data_rng)
        tape = Tape()
        if vrfm:
            recon, kl, total = vrfm_loss_nodes(model, encoder, batch, train_cfg.kl_weight, noise_rng, tape)
            vals = (float(recon.value), float(kl.value), float(total.value))
        else:
            total = rfm_loss_node(model, batch, tape)
            vals = (float(total.value), 0.0, float(total.value))
        if not np.all(np.isfinite(vals)):
            raise TrainingAborted(it, last_finite)
        last_finite = vals
        tape.backward(total)
        grads = model.params.gradients(tape)
        if encoder is not None:
            grads.update(encoder.params.gradients(tape))
        tape.clear()
        opt.step(grads)

        window += vals
        window_n += 1
        if it % train_cfg.log_every == 0 or it == train_cfg.iterations:
            rec = LossRecord(it, *(window / window_n))
            history.append(rec)
            window[:] = 0.0
            window_n = 0
            if progress is not None:
                progress(rec)
            logger.debug("iter %d recon %.5f kl %.5f total %.5f", it, rec.recon, rec.kl, rec.total)

    params = model.params.state()
    if encoder is not None:
        params.update(encoder.params.state())
    last = history[-1]
    ckpt = Checkpoint(
        objective=train_cfg.objective,
        model_config=model_cfg.to_dict(),
        posterior_config=posterior_cfg.to_dict() if vrfm else None,
        train_config=train_cfg.to_dict(),
        params={k: np.array(v) for k, v in params.items()},
        final_losses={"recon": last.recon, "kl": last.kl, "total": last.total},
        seed=train_cfg.seed,
        source=_spec_dict(source),
        target=_spec_dict(target),
    )
    return ckpt, history


def write_loss_csv(history, path):
    with open(path, "w") as f:
        f.write("iteration,recon,kl,total\n")
        for r in history:
            f.write(f"{r.iteration},{r.recon!r},{r.kl!r},{r.total!r}\n")
