"""Blind-spot training: masked L2 objective, Adam with a staircase schedule,
per-epoch validation, checkpointing and curve logging."""
from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import imagepipe as ip
from .checkpoint import Checkpoint, read_checkpoint, save_checkpoint
from .errors import ConfigError, NumericalError
from .metrics import EvalResult, psnr
from .model import DenoiserModel, blind_batch, forward_blind, full_inference, to_packed
from .tensorcore import OptimizerState, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    crop: int = 128
    lr_init: float = 3e-4
    lr_gamma: float = 0.25
    lr_step: int = 20
    weight_decay: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # on-the-fly Gaussian noise (0-255 scale); None trains on the images as given
    sigma_min: float | None = 5.0
    sigma_max: float | None = 50.0
    steps_per_epoch: int | None = None
    workers: int = 1

    def __post_init__(self):
        for name in ("epochs", "batch_size", "crop", "lr_step", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr_init", "lr_gamma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if (self.sigma_min is None) != (self.sigma_max is None):
            raise ConfigError("sigma_min and sigma_max must be set together")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")

    @property
    def noise(self) -> ip.NoiseSpec | None:
        if self.sigma_min is None:
            return None
        return ip.NoiseSpec(self.sigma_min, self.sigma_max)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr_init * cfg.lr_gamma ** (epoch // cfg.lr_step)


@dataclass
class TrainData:
    """Training images plus validation images that carry a clean reference.

    In synthetic-noise runs the training pixels are clean and noise is drawn
    per step; validation images get one fixed noise draw.
    """

    train: list[ip.ImageSample]
    val: list[ip.ImageSample] = field(default_factory=list)


@dataclass
class TrainResult:
    model: DenoiserModel
    curve: list[dict]
    losses: list[float]
    best_path: Path | None = None
    final_path: Path | None = None
    last_path: Path | None = None


def blind_l2_loss(stage2: torch.Tensor, noisy: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Mean squared error over masked positions only.

    ``masks`` is ``(N, H, W)`` bool; unmasked predictions never enter the sum.
    """
    if stage2.shape != noisy.shape or masks.shape != stage2.shape[:3]:
        raise ConfigError(f"loss shapes disagree: {tuple(stage2.shape)}, {tuple(noisy.shape)}, "
                          f"{tuple(masks.shape)}")
    if not bool(masks.any()):
        raise ConfigError("mask selects no positions")
    diff = stage2[masks] - noisy[masks]
    return (diff * diff).mean()


def prepare_sample(sample: ip.ImageSample, cfg: TrainConfig, mode: str, pd_factor: int, stride: int,
                   seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Crop/augment, add noise, PD-split and mask one training image.

    Returns ``(blinds, targets, masks)`` with ``p*p*s*s`` entries each.
    """
    packed = to_packed(sample.pixels.astype(np.float32), mode)
    crop = cfg.crop // 2 if mode == "raw-bayer" else cfg.crop
    img = ip.augment(packed, crop, [*seed, 0])
    if cfg.noise is not None:
        img = ip.add_gaussian(img, cfg.noise, [*seed, 1])
    blinds, stacks = blind_batch(img, pd_factor, stride)
    per = stride * stride
    subs = ip.pd_split(img, pd_factor)
    targets = np.concatenate([np.repeat(sub[None], per, axis=0) for sub in subs])
    masks = np.concatenate([st.masks for st in stacks])
    return blinds, targets, masks


def validation_inputs(data: TrainData, cfg: TrainConfig) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """``(name, noisy, clean)`` triples; synthetic runs noise the clean image with a fixed seed."""
    out = []
    for i, s in enumerate(data.val):
        clean = s.clean if s.clean is not None else s.pixels
        noisy = s.pixels
        if cfg.noise is not None:
            noisy = ip.add_gaussian(clean.astype(np.float32), cfg.noise, [cfg.seed, 7919, i])
        out.append((s.name or f"val{i}", noisy.astype(np.float32), clean.astype(np.float32)))
    return out


def validate(model: DenoiserModel, triples) -> EvalResult:
    result = EvalResult()
    mode = model.config.mode
    for name, noisy, clean in triples:
        den = full_inference(noisy, model)
        result.add(name, to_packed(den, mode), to_packed(clean, mode))
    return result


def _batch_order(n: int, steps: int, batch: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng([seed, epoch])
    need = steps * batch
    reps = -(-need // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:need]


def train(model: DenoiserModel, data: TrainData, cfg: TrainConfig, out_dir=None,
          resume=None, max_steps: int | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``model`` in place.

    ``resume`` is a checkpoint path (or :class:`Checkpoint`) written by an
    earlier call; training continues from its recorded step. ``max_steps``
    stops after that many global steps and writes ``last.ckpt``. Every random
    draw is keyed on ``(seed, epoch)`` or ``(seed, step, slot)``, so a resumed
    run replays the uninterrupted one exactly when ``workers == 1``.
    """
    if not data.train:
        raise ConfigError("no training images")
    mcfg = model.config
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.workers == 1:
        torch.set_num_threads(1)
    n = len(data.train)
    spe = cfg.steps_per_epoch or math.ceil(n / cfg.batch_size)
    total = cfg.epochs * spe
    stop = total if max_steps is None else min(total, max_steps)

    opt = OptimizerState(cfg.lr_init, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps)
    curve: list[dict] = []
    step = 0
    epoch_losses: list[float] = []
    best = -math.inf
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else read_checkpoint(resume)
        if ck.model.config != mcfg:
            raise ConfigError("checkpoint model config differs from the model being trained")
        with torch.no_grad():
            for name, t in model.params.items():
                t.copy_(ck.model.params[name])
        model.params.step_count = ck.model.params.step_count
        if ck.optimizer is not None:
            opt = ck.optimizer
        curve = list(ck.curve)
        step = int(ck.position.get("step", 0))
        epoch_losses = list(ck.position.get("epoch_losses", []))
        best = float(ck.position.get("best_psnr", -math.inf))

    val = validation_inputs(data, cfg)
    noisy_psnr = float(np.mean([psnr(nz, cl) for _, nz, cl in val])) if val else None
    losses: list[float] = []
    result = TrainResult(model, curve, losses)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def checkpoint(name: str, position: dict) -> Path | None:
        if out_dir is None:
            return None
        return save_checkpoint(out_dir / name, Checkpoint(model, curve, opt, position,
                                                          {"train_config": asdict(cfg)}))

    def position() -> dict:
        return {"step": step, "epoch_losses": epoch_losses, "best_psnr": best}

    try:
        while step < stop:
            epoch, slot = divmod(step, spe)
            order = _batch_order(n, spe, cfg.batch_size, cfg.seed, epoch)
            idx = order[slot * cfg.batch_size:(slot + 1) * cfg.batch_size]
            jobs = [(data.train[i], cfg, mcfg.mode, mcfg.pd_factor, mcfg.mask_stride, (cfg.seed, step, j))
                    for j, i in enumerate(idx)]
            prepared = list(pool.map(lambda a: prepare_sample(*a), jobs)) if pool else \
                [prepare_sample(*a) for a in jobs]
            blinds = torch.from_numpy(np.concatenate([p[0] for p in prepared]))
            targets = torch.from_numpy(np.concatenate([p[1] for p in prepared]))
            masks = torch.from_numpy(np.concatenate([p[2] for p in prepared]))

            opt.learning_rate = lr_at(epoch, cfg)
            model.params.zero_grad()
            _, stage2 = forward_blind(model, blinds)
            loss = blind_l2_loss(stage2, targets, masks)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at step {step} (epoch {epoch})")
            loss.backward()
            adam_step(model.params, opt)
            losses.append(value)
            epoch_losses.append(value)
            step += 1

            if step % spe == 0:
                record = {"epoch": epoch, "loss": float(np.mean(epoch_losses)), "lr": opt.learning_rate,
                          "val_psnr": None, "val_ssim": None, "noisy_psnr": noisy_psnr}
                epoch_losses = []
                if val:
                    ev = validate(model, val)
                    record["val_psnr"], record["val_ssim"] = ev.mean_psnr, ev.mean_ssim
                curve.append(record)
                log.info("epoch %d loss %.6f psnr %s ssim %s", epoch, record["loss"],
                         record["val_psnr"], record["val_ssim"])
                if on_epoch is not None:
                    on_epoch(record)
                if record["val_psnr"] is not None and record["val_psnr"] > best:
                    best = record["val_psnr"]
                    result.best_path = checkpoint("best.ckpt", position())
                result.last_path = checkpoint("last.ckpt", position())
    finally:
        if pool is not None:
            pool.shutdown()

    if step >= total:
        result.final_path = checkpoint("final.ckpt", position())
        if result.best_path is None:
            result.best_path = result.final_path
    else:
        result.last_path = checkpoint("last.ckpt", position())
    if out_dir is not None:
        write_curve(curve, out_dir / "curve.jsonl")
    return result


def write_curve(curve: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for rec in curve:
            fh.write(json.dumps(rec) + "\n")
    return path


def read_curve(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
