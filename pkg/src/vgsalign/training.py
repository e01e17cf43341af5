"""Adam, cosine-annealing schedules, checkpoints and the joint training loop."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import container
from .audio import AudioEmbedder
from .config import ModelConfig
from .core import ParamStore, backward
from .dataset import AlignedPair, PairDataset, iter_batches
from .image import ImageEmbedder
from .objective import HingeConfig, hinge_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss", "lr", "r_at_10_s2i", "r_at_10_i2s")
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


# --- optimizer --------------------------------------------------------------


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: ParamStore, state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad`` (missing grads count as zero)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))


# --- schedules --------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "CALR"
    eta_max: float = 2e-4
    eta_min: float = 0.0
    T0: float = 1
    mult: float = 2

    def __post_init__(self):
        if self.kind not in ("CALR", "CALWR"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if not self.eta_max > self.eta_min >= 0:
            raise ValueError("need eta_max > eta_min >= 0")
        if self.T0 <= 0 or self.mult < 1:
            raise ValueError("need T0 > 0 and mult >= 1")


def cycle_position(sched: ScheduleConfig, progress: float) -> tuple[float, float]:
    """(T_cur, T_i) for a point measured in epochs since the run started."""
    if progress < 0:
        raise ValueError("negative schedule progress")
    if sched.kind == "CALR":
        return min(progress, sched.T0), sched.T0
    length, start = float(sched.T0), 0.0
    while progress >= start + length:
        start += length
        length *= sched.mult
    return progress - start, length


def lr_at(sched: ScheduleConfig, progress: float) -> float:
    t_cur, t_i = cycle_position(sched, progress)
    return sched.eta_min + 0.5 * (sched.eta_max - sched.eta_min) * (1.0 + math.cos(math.pi * t_cur / t_i))


def restart_epochs(sched: ScheduleConfig, horizon: float) -> list[float]:
    """Cumulative epochs at which a warm restart happens, up to ``horizon``."""
    if sched.kind == "CALR":
        return []
    out, length, start = [], float(sched.T0), 0.0
    while start + length <= horizon:
        start += length
        out.append(start)
        length *= sched.mult
    return out


# --- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ModelConfig
    epoch: int
    audio_state: dict[str, np.ndarray]
    image_state: dict[str, np.ndarray]
    optimizer: OptimizerState
    schedule: ScheduleConfig
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    def build_models(self, dtype: torch.dtype = torch.float32) -> tuple[AudioEmbedder, ImageEmbedder]:
        audio = AudioEmbedder(self.model_config.audio()).to(dtype)
        image = ImageEmbedder(self.model_config.image()).to(dtype)
        _load_state(audio, self.audio_state)
        _load_state(image, self.image_state)
        return audio, image


def _module_state(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, state: dict[str, np.ndarray]) -> None:
    ref = module.state_dict()
    missing = set(ref) - set(state)
    unexpected = set(state) - set(ref)
    if missing or unexpected:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
    module.load_state_dict({k: torch.from_numpy(np.array(state[k])).to(ref[k].dtype) for k in ref})


def save_checkpoint(
    path: str | os.PathLike,
    model_config: ModelConfig,
    audio: AudioEmbedder,
    image: ImageEmbedder,
    optimizer: OptimizerState,
    schedule: ScheduleConfig,
    epoch: int,
    rng: np.random.Generator | None = None,
    extra: dict | None = None,
) -> None:
    tensors: dict[str, np.ndarray] = {}
    for prefix, module in (("audio", audio), ("image", image)):
        for k, v in _module_state(module).items():
            tensors[f"{prefix}/{k}"] = v
    for k, v in optimizer.m.items():
        tensors[f"adam_m/{k}"] = v.detach().numpy()
    for k, v in optimizer.v.items():
        tensors[f"adam_v/{k}"] = v.detach().numpy()
    meta = {
        "version": CHECKPOINT_VERSION,
        "fingerprint": model_config.fingerprint(),
        "model": {
            "N": model_config.N,
            "G": model_config.G,
            "block_config": list(model_config.block_config),
            "growth": model_config.growth,
            "conv_stride": model_config.conv_stride,
        },
        "epoch": epoch,
        "optimizer": {"beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps, "step": optimizer.step},
        "schedule": {
            "kind": schedule.kind,
            "eta_max": schedule.eta_max,
            "eta_min": schedule.eta_min,
            "T0": schedule.T0,
            "mult": schedule.mult,
        },
        "rng_state": None if rng is None else rng.bit_generator.state,
        "extra": extra or {},
    }
    container.save(path, tensors, meta)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    tensors, meta = container.load(path)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    model_config = ModelConfig(**meta["model"])
    if model_config.fingerprint() != meta["fingerprint"]:
        raise ValueError(f"{path}: config fingerprint mismatch")
    groups: dict[str, dict[str, np.ndarray]] = {"audio": {}, "image": {}, "adam_m": {}, "adam_v": {}}
    for key, arr in tensors.items():
        prefix, _, name = key.partition("/")
        groups[prefix][name] = arr
    opt = OptimizerState(**meta["optimizer"])
    opt.m = {k: torch.from_numpy(v) for k, v in groups["adam_m"].items()}
    opt.v = {k: torch.from_numpy(v) for k, v in groups["adam_v"].items()}
    return Checkpoint(
        model_config=model_config,
        epoch=meta["epoch"],
        audio_state=groups["audio"],
        image_state=groups["image"],
        optimizer=opt,
        schedule=ScheduleConfig(**meta["schedule"]),
        rng_state=meta.get("rng_state"),
        extra=meta.get("extra", {}),
    )


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:04d}.ckpt"


# --- metric log -------------------------------------------------------------


def append_log_row(path: Path, row: dict) -> None:
    new = not path.exists() or path.stat().st_size == 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerow({k: row.get(k, "") for k in LOG_COLUMNS})


def read_log(path: str | os.PathLike) -> list[dict]:
    """Parse a metric log; raises ``ValueError`` naming the offending line."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != LOG_COLUMNS:
            raise ValueError(f"{path}:1: expected header {','.join(LOG_COLUMNS)}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(LOG_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(LOG_COLUMNS)} fields, got {len(rec)}")
            try:
                row = {"epoch": int(rec[0]), "loss": float(rec[1]), "lr": float(rec[2])}
                row["r_at_10_s2i"] = float(rec[3]) if rec[3] else None
                row["r_at_10_i2s"] = float(rec[4]) if rec[4] else None
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            rows.append(row)
    return rows


# --- training loop ----------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    hinge: HingeConfig = field(default_factory=HingeConfig)
    seed: int = 0
    dtype: torch.dtype = torch.float32
    eval_split: str | None = None


@dataclass
class TrainResult:
    epoch_losses: list[float]
    step_losses: list[float]
    checkpoints: list[Path]
    audio: AudioEmbedder
    image: ImageEmbedder
    optimizer: OptimizerState


def build_models(model_config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32):
    audio = AudioEmbedder(model_config.audio(), seed=seed).to(dtype)
    image = ImageEmbedder(model_config.image(), seed=seed + 1).to(dtype)
    return audio, image


def train(
    dataset: PairDataset,
    model_config: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    log_path: str | os.PathLike | None = None,
    models: tuple[AudioEmbedder, ImageEmbedder] | None = None,
    optimizer: OptimizerState | None = None,
    start_epoch: int = 0,
    rng: np.random.Generator | None = None,
    train_pairs: Sequence[AlignedPair] | None = None,
) -> TrainResult:
    """Jointly train both embedders on the train split with the batch hinge loss.

    The learning rate follows ``cfg.schedule`` in fractional epochs counted
    from ``start_epoch``. A checkpoint is written after every epoch when
    ``out_dir`` is given; ``log_path`` receives one CSV row per epoch.
    """
    pairs = list(train_pairs) if train_pairs is not None else dataset.split("train")
    pairs = dataset.usable(pairs)
    if not pairs:
        raise ValueError("no training pairs")
    if not 2 <= cfg.batch_size <= 64:
        raise ValueError("batch size must lie in [2, 64]")
    torch.manual_seed(cfg.seed)
    audio, image = models if models is not None else build_models(model_config, cfg.seed, cfg.dtype)
    params = ParamStore.from_modules(audio=audio, image=image)
    opt = optimizer if optimizer is not None else OptimizerState()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    sched = cfg.schedule
    if sched.kind == "CALR":
        sched = ScheduleConfig("CALR", sched.eta_max, sched.eta_min, max(cfg.epochs, 1), sched.mult)
    out_dir = None if out_dir is None else Path(out_dir)
    log_path = None if log_path is None else Path(log_path)

    steps_per_epoch = max(1, sum(1 for s in range(0, len(pairs), cfg.batch_size) if len(pairs) - s >= 2))
    epoch_losses: list[float] = []
    step_losses: list[float] = []
    checkpoints: list[Path] = []
    for e in range(cfg.epochs):
        audio.train()
        image.train()
        batch_losses = []
        epoch_lr = lr_at(sched, e)
        for b, batch in enumerate(iter_batches(dataset, pairs, cfg.batch_size, rng, "train", min_batch=2)):
            lr = lr_at(sched, e + b / steps_per_epoch)
            a_emb = audio(batch.mfcc.to(cfg.dtype), batch.lengths)
            i_emb = image(batch.images.to(cfg.dtype))
            loss = hinge_loss(a_emb, i_emb, cfg.hinge)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {start_epoch + e + 1}, batch {b}: pairs {batch.pair_ids}"
                )
            params.zero_grad()
            backward(loss)
            adam_step(params, opt, lr)
            batch_losses.append(loss.item())
        step_losses.extend(batch_losses)
        epoch = start_epoch + e + 1
        mean_loss = float(np.mean(batch_losses))
        epoch_losses.append(mean_loss)
        row = {"epoch": epoch, "loss": f"{mean_loss:.8g}", "lr": f"{epoch_lr:.8g}"}
        if cfg.eval_split is not None:
            from .evaluation import evaluate

            report = evaluate(dataset, dataset.split(cfg.eval_split), audio, image)
            k = max(report.r_at_k)
            row["r_at_10_s2i"], row["r_at_10_i2s"] = (f"{v:.6f}" for v in report.r_at_k[k])
        log.info("epoch %d loss %.5f lr %.3g", epoch, mean_loss, epoch_lr)
        if log_path is not None:
            append_log_row(log_path, row)
        if out_dir is not None:
            path = out_dir / checkpoint_name(epoch)
            save_checkpoint(path, model_config, audio, image, opt, sched, epoch, rng)
            checkpoints.append(path)
    return TrainResult(epoch_losses, step_losses, checkpoints, audio, image, opt)


def warm_restart_run(
    ckpt: Checkpoint,
    dataset: PairDataset,
    epochs: int,
    lr_scale: float = 0.5,
    cfg: TrainConfig | None = None,
    out_dir: str | os.PathLike | None = None,
    log_path: str | os.PathLike | None = None,
) -> TrainResult:
    """Continue from ``ckpt`` with fresh Adam moments and a new schedule whose peak LR is scaled."""
    cfg = cfg or TrainConfig()
    base = cfg.schedule
    sched = ScheduleConfig(base.kind, base.eta_max * lr_scale, base.eta_min * lr_scale, base.T0, base.mult)
    run_cfg = TrainConfig(epochs, cfg.batch_size, sched, cfg.hinge, cfg.seed, cfg.dtype, cfg.eval_split)
    models = ckpt.build_models(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    if ckpt.rng_state is not None:
        rng.bit_generator.state = ckpt.rng_state
    return train(
        dataset,
        ckpt.model_config,
        run_cfg,
        out_dir,
        log_path,
        models=models,
        optimizer=OptimizerState(),
        start_epoch=ckpt.epoch,
        rng=rng,
    )
