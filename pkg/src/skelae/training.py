"""Mini-batch training loop for the four autoencoder variants.

Per mini-batch, in order: one forward pass of encoder and decoder; an Adam
step on the reconstruction loss; optionally an Adam step on the skeletal
Laplacian regularizer of the same reconstructions; optionally a rotated copy of
the batch is encoded and the encoder is updated through the gradient-reversed
angle regressor.  All optimizer steps share one Adam state.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from .autodiff import Adam, NonFiniteError, backward, checkpoint
from .autodiff.checkpoint import adam_from_record, adam_to_record
from .data import DatasetSplit
from .graph import SkeletonGraph, r_skel
from .model import Autoencoder, ModelConfig, mse_loss
from .viewpoint import EulerAngles, SsviHead, rotate_coords, rotation_matrix, sample_angles, ssvi_loss

log = logging.getLogger(__name__)

VARIANTS = {
    "ae": {"laplacian": False, "ssvi": False},
    "ae-l": {"laplacian": True, "ssvi": False},
    "grae": {"laplacian": False, "ssvi": True},
    "grae-l": {"laplacian": True, "ssvi": True},
}
COMBINE_MODES = ("sequential", "weighted")


class DivergenceError(FloatingPointError):
    """A loss became non-finite; ``checkpoint`` names the last good checkpoint, if any."""

    def __init__(self, message: str, step: int, checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    laplacian: bool = False
    ssvi: bool = False
    combine: str = "sequential"
    mu: float = 1.0  # weight of the regularizer in weighted mode
    checkpoint_every: int = 0  # steps; 0 disables periodic checkpoints
    grl_lambda: float = 1.0
    ssvi_hidden: int = 128
    per_sequence_angles: bool = False
    # with ssvi on, reconstruct the rotated batch too instead of the original one
    rotate_reconstruction: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.combine not in COMBINE_MODES:
            raise ValueError(f"combine must be one of {COMBINE_MODES}, got {self.combine!r}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")
        if not self.grl_lambda > 0:
            raise ValueError("grl_lambda must be positive")

    @classmethod
    def for_variant(cls, variant: str, **kw) -> "TrainConfig":
        try:
            flags = VARIANTS[variant]
        except KeyError:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None
        return cls(**{**kw, **flags})

    @property
    def variant(self) -> str:
        for name, flags in VARIANTS.items():
            if flags == {"laplacian": self.laplacian, "ssvi": self.ssvi}:
                return name
        raise AssertionError("unreachable")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    """Per-step loss records; ``rskel`` and ``ssvi`` appear only when enabled."""

    records: List[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("step indices must be strictly increasing")
        self.records.append(rec)

    def values(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records if key in r])

    def epoch_means(self, key: str) -> np.ndarray:
        epochs = sorted({r["epoch"] for r in self.records if key in r})
        return np.array([np.mean([r[key] for r in self.records if r["epoch"] == e and key in r]) for e in epochs])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "TrainLog":
        return cls([json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()])


@dataclass
class TrainResult:
    model: Autoencoder
    head: Optional[SsviHead]
    log: TrainLog
    optimizer: Adam
    steps: int
    last_checkpoint: Optional[Path] = None


def _as_array(data, dtype) -> np.ndarray:
    if isinstance(data, DatasetSplit):
        data = data.arrays("train")[0]
    x = np.asarray(data, dtype=dtype)
    if x.ndim != 4 or len(x) == 0:
        raise ValueError(f"training data must be a non-empty (N, 3, m, t) array, got shape {x.shape}")
    return x


def _batch_angles(cfg: TrainConfig, epoch: int, batch: int, n: int):
    rng = np.random.default_rng([cfg.seed, 1, epoch, batch])
    if not cfg.per_sequence_angles:
        return sample_angles(rng)
    return np.stack([sample_angles(rng).as_array() for _ in range(n)])


def _rotate_batch(x: np.ndarray, angles) -> np.ndarray:
    if isinstance(angles, np.ndarray):
        mats = [rotation_matrix(EulerAngles(*a)) for a in angles]
        return np.stack([rotate_coords(xi, R) for xi, R in zip(x, mats)])
    return rotate_coords(x, rotation_matrix(angles))


def _finite(value: float, what: str, step: int, last: Optional[Path]) -> float:
    v = float(value)
    if not np.isfinite(v):
        raise DivergenceError(f"{what} became non-finite at step {step}", step, last)
    return v


def make_head(model: Autoencoder, cfg: TrainConfig) -> SsviHead:
    return SsviHead(model.config.latent_dim, hidden=cfg.ssvi_hidden, lam=cfg.grl_lambda,
                    seed=[cfg.seed, 2], dtype=model.dtype)


def _groups(model: Autoencoder, head: Optional[SsviHead], opt: Adam) -> dict:
    groups = model.state()
    if head is not None:
        groups["head"] = {k: p.value for k, p in head.params.items()}
    adam_groups, _ = adam_to_record(opt.state)
    groups.update(adam_groups)
    return groups


def save_training_checkpoint(path, model, head, opt, cfg: TrainConfig, epoch: int, batch: int, step: int) -> Path:
    """Write atomically so an interrupted write never replaces a good checkpoint."""
    path = Path(path)
    _, adam_meta = adam_to_record(opt.state)
    meta = {
        "model": model.config.to_dict(),
        "train": cfg.to_dict(),
        "adam": adam_meta,
        "progress": {"epoch": epoch, "batch": batch, "step": step},
    }
    tmp = path.with_name(path.name + ".tmp")
    checkpoint.save(tmp, _groups(model, head, opt), meta)
    os.replace(tmp, path)
    return path


def load_model(path) -> Autoencoder:
    groups, meta = checkpoint.load(path)
    model = Autoencoder(ModelConfig.from_dict(meta["model"]))
    model.load_state(groups)
    return model


def _step(model, head, opt, cfg: TrainConfig, L, x, epoch: int, batch: int, rec: dict, last_ckpt) -> None:
    """One mini-batch of the training sequence; losses are written into ``rec``."""
    step = rec["step"]
    angles = _batch_angles(cfg, epoch, batch, len(x)) if cfg.ssvi else None
    if cfg.ssvi and cfg.rotate_reconstruction:
        x = _rotate_batch(x, angles)
    xhat = model.reconstruct(x, mode="train")
    loss = mse_loss(x, xhat)
    rec["mse"] = _finite(loss.value, "reconstruction loss", step, last_ckpt)
    if cfg.laplacian:
        reg = r_skel(xhat, L)
        rec["rskel"] = _finite(reg.value, "skeletal regularizer", step, last_ckpt)
    if cfg.laplacian and cfg.combine == "weighted":
        opt.zero_grad()
        backward(loss + reg * cfg.mu)
        opt.step()
    else:
        opt.zero_grad()
        backward(loss)
        opt.step()
        if cfg.laplacian:
            # same graph, so this gradient is taken at the pre-step parameters
            opt.zero_grad()
            backward(reg)
            opt.step()
    if cfg.ssvi:
        xr = x if cfg.rotate_reconstruction else _rotate_batch(x, angles)
        z, _ = model.encode(xr)
        sl = ssvi_loss(z, angles, head)
        rec["ssvi"] = _finite(sl.value, "viewpoint loss", step, last_ckpt)
        opt.zero_grad()
        backward(sl)
        opt.step()


def train(
    model: Autoencoder,
    data: Union[DatasetSplit, np.ndarray],
    graph: Optional[SkeletonGraph] = None,
    config: TrainConfig = TrainConfig(),
    checkpoint_dir=None,
    resume_from=None,
    stop_at_step: Optional[int] = None,
) -> TrainResult:
    """Run the training loop; deterministic given ``config.seed`` and the model's init.

    ``resume_from`` restores parameters, batch-norm buffers, Adam state and the
    loop position from a checkpoint written by this function.  ``stop_at_step``
    ends the run early once that many mini-batches are done.
    """
    cfg = config
    x_all = _as_array(data, model.dtype)
    n, m = len(x_all), x_all.shape[2]
    if x_all.shape[1:] != model.config.input_shape:
        raise ValueError(f"data sequences {x_all.shape[1:]} do not match model input {model.config.input_shape}")
    if cfg.laplacian:
        if graph is None:
            raise ValueError("laplacian mode needs a skeleton graph")
        if graph.m != m:
            raise ValueError(f"graph has {graph.m} joints but data has {m}")
    head = make_head(model, cfg) if cfg.ssvi else None
    params = dict(model.params)
    if head is not None:
        params.update(head.params)
    opt = Adam(params, lr=cfg.lr)
    log_ = TrainLog()
    start_epoch, start_batch, step = 0, 0, 0
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    last_ckpt: Optional[Path] = None

    if resume_from is not None:
        groups, meta = checkpoint.load(resume_from)
        model.load_state(groups)
        if head is not None:
            for k, p in head.params.items():
                p.value = np.array(groups["head"][k], dtype=model.dtype)
        opt.state = adam_from_record(groups, meta["adam"], model.dtype)
        prog = meta["progress"]
        start_epoch, start_batch, step = prog["epoch"], prog["batch"], prog["step"]
        last_ckpt = Path(resume_from)
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    L = graph.L if cfg.laplacian else None
    n_batches = -(-n // cfg.batch_size)
    t0 = time.perf_counter()

    def checkpoint_now(epoch, batch):
        nonlocal last_ckpt
        if ckpt_dir is not None:
            last_ckpt = save_training_checkpoint(ckpt_dir / "last.ckpt", model, head, opt, cfg, epoch, batch, step)

    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, 0, epoch]).permutation(n)
        first = start_batch if epoch == start_epoch else 0
        for b in range(first, n_batches):
            if stop_at_step is not None and step >= stop_at_step:
                return TrainResult(model, head, log_, opt, step, last_ckpt)
            x = x_all[order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            rec = {"step": step, "epoch": epoch}
            try:
                # overflow surfaces as NonFiniteError, not as numpy warnings
                with np.errstate(over="ignore", invalid="ignore"):
                    _step(model, head, opt, cfg, L, x, epoch, b, rec, last_ckpt)
            except NonFiniteError as e:
                raise DivergenceError(f"non-finite value at step {step}: {e}", step, last_ckpt) from e
            rec["time"] = time.perf_counter() - t0
            log_.append(rec)
            step += 1
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                nb, ne = (b + 1, epoch) if b + 1 < n_batches else (0, epoch + 1)
                checkpoint_now(ne, nb)
        done = [r for r in log_.records if r["epoch"] == epoch]
        summary = {k: float(np.mean([r[k] for r in done])) for k in ("mse", "rskel", "ssvi") if done and k in done[0]}
        log.info("epoch %d %s", epoch, " ".join(f"{k}={v:.6g}" for k, v in summary.items()))
    if ckpt_dir is not None:
        checkpoint_now(cfg.epochs, 0)
    return TrainResult(model, head, log_, opt, step, last_ckpt)
