"""Supervised training: smooth-L1 loss, SGD with momentum, cosine schedule,
random crops and per-epoch parameter snapshots."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .datasets import StereoSample, stack_batch
from .errors import ConfigurationError, NumericError

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 2
    lr_max: float = 0.025
    lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 3e-4
    crop: int | None = 336
    seed: int = 0
    snapshots: bool = True
    # global gradient-norm clip; the plain recipe diverges at lr 0.025 without it
    grad_clip: float | None = 1.0

    def __post_init__(self) -> None:
        if self.lr_min > self.lr_max:
            raise ConfigurationError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ParameterSnapshot:
    epoch: int
    theta: np.ndarray
    loss: float


@dataclass
class TrainResult:
    model: nn.Module
    snapshots: list[ParameterSnapshot] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    epes: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


def smooth_l1_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over valid pixels of ``0.5 e^2`` if ``|e| < 1`` else ``|e| - 0.5``."""
    err = (pred - gt).abs()
    per_pixel = torch.where(err < 1.0, 0.5 * err**2, err - 0.5)
    if mask is None:
        return per_pixel.mean()
    mask = mask.to(per_pixel.dtype)
    return (per_pixel * mask).sum() / mask.sum().clamp_min(1.0)


def cosine_lr(epoch: float, total: float, lr_max: float = 0.025, lr_min: float = 0.001) -> float:
    """``lr_min + (lr_max - lr_min) * (1 + cos(pi * epoch / total)) / 2``."""
    if total <= 0:
        return lr_max
    if epoch >= total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total))


def sgd_step(params, grads, state, lr: float, momentum: float = 0.9, weight_decay=0.0):
    """In-place SGD with momentum and L2 weight decay.

    ``g' = g + wd * theta``, ``v = momentum * v + g'``, ``theta -= lr * v``.
    ``state`` is a list of velocity buffers (None before the first step);
    ``weight_decay`` may be a scalar or one value per parameter.
    """
    if not isinstance(weight_decay, (list, tuple)):
        weight_decay = [weight_decay] * len(params)
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            g = g + weight_decay[i] * p if weight_decay[i] else g
            if momentum:
                if state[i] is None:
                    state[i] = g.clone()
                else:
                    state[i].mul_(momentum).add_(g)
                g = state[i]
            p.sub_(lr * g)
    return params, state


def clip_grad_norm(grads, max_norm: float):
    """Rescale gradients so their global L2 norm is at most ``max_norm``."""
    present = [g for g in grads if g is not None]
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in present))
    if total <= max_norm:
        return grads
    scale = float(max_norm / total)
    return [None if g is None else g * scale for g in grads]


def decay_mask(model: nn.Module) -> list[bool]:
    """True for parameters that receive weight decay.

    Normalization scales/shifts and relative position bias tables are exempt.
    """
    exempt = set()
    for module in model.modules():
        if isinstance(module, (nn.LayerNorm, nn.GroupNorm, nn.BatchNorm2d, nn.BatchNorm3d)):
            exempt.update(id(p) for p in module.parameters(recurse=False))
    flags = []
    for name, p in model.named_parameters():
        flags.append(id(p) not in exempt and "relative_position_bias_table" not in name)
    return flags


def flatten_parameters(model: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()]).cpu().numpy().copy()


def random_crop_pair(sample: StereoSample, size, rng: np.random.Generator) -> StereoSample:
    """Crop the same window from both views, the disparity and the masks."""
    if size is None:
        return sample
    ch, cw = (size, size) if isinstance(size, int) else size
    h, w = sample.shape
    if ch > h or cw > w:
        raise ConfigurationError(f"crop {ch}x{cw} larger than image {h}x{w}")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return sample.window(top, left, ch, cw)


def _epe(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> float:
    m = mask.to(pred.dtype)
    return float(((pred - gt).abs() * m).sum() / m.sum().clamp_min(1.0))


def train(model: nn.Module, dataset: list[StereoSample], cfg: TrainConfig) -> TrainResult:
    """Train ``model`` on in-memory samples.

    Snapshots (when enabled) are taken before the first epoch and after every
    epoch, giving ``epochs + 1`` parameter vectors. The learning rate follows
    the cosine schedule per epoch, reaching ``lr_min`` on the last epoch.

    Raises:
        NumericError: The loss became non-finite.
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    dmax = getattr(model, "dmax", None)
    params = list(model.parameters())
    wd = [cfg.weight_decay if flag else 0.0 for flag in decay_mask(model)]
    state: list = [None] * len(params)
    result = TrainResult(model)
    if cfg.snapshots:
        result.snapshots.append(ParameterSnapshot(0, flatten_parameters(model), float("nan")))

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs - 1, cfg.lr_max, cfg.lr_min)
        model.train()
        order = rng.permutation(len(dataset))
        losses, epes = [], []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [random_crop_pair(dataset[i], cfg.crop, rng) for i in order[start : start + cfg.batch_size]]
            left, right, gt, valid = stack_batch(batch)
            if dmax is not None:
                valid = valid & (gt < dmax)
            pred = model(left, right)
            loss = smooth_l1_loss(pred, gt, valid)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}, lr {lr:.6g}")
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            if cfg.grad_clip:
                grads = clip_grad_norm(grads, cfg.grad_clip)
            sgd_step(params, grads, state, lr, cfg.momentum, wd)
            losses.append(float(loss.detach()))
            epes.append(_epe(pred.detach(), gt, valid))
        result.losses.append(float(np.mean(losses)))
        result.epes.append(float(np.mean(epes)))
        result.lrs.append(lr)
        logger.info("epoch %d lr %.5f loss %.4f epe %.3f", epoch, lr, result.losses[-1], result.epes[-1])
        if cfg.snapshots:
            result.snapshots.append(ParameterSnapshot(epoch + 1, flatten_parameters(model), result.losses[-1]))
    return result


def save_run(result: TrainResult, out_dir, train_cfg: TrainConfig, extra: dict | None = None) -> Path:
    """Write ``epoch_%04d`` checkpoints and a ``run.json`` manifest."""
    from .checkpoint import save_checkpoint

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = result.model
    names = [n for n, _ in model.named_parameters()]
    shapes = [tuple(p.shape) for p in model.parameters()]
    for snap in result.snapshots:
        arrays = {}
        offset = 0
        for name, shape in zip(names, shapes):
            n = math.prod(shape)
            arrays[name] = snap.theta[offset : offset + n].reshape(shape)
            offset += n
        save_checkpoint(model, out_dir / f"epoch_{snap.epoch:04d}", arrays=arrays, extra={"epoch": snap.epoch})
    manifest = {
        "train_config": train_cfg.to_dict(),
        "model_config": model.config.to_dict() if hasattr(model, "config") else None,
        "losses": result.losses,
        "epes": result.epes,
        "lrs": result.lrs,
        "snapshots": [f"epoch_{s.epoch:04d}" for s in result.snapshots],
        "snapshot_losses": [None if math.isnan(s.loss) else s.loss for s in result.snapshots],
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "run.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
