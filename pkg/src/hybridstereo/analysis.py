"""Loss-landscape slices along random directions and PCA views of training paths."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .errors import NumericError
from .training import ParameterSnapshot, smooth_l1_loss

Batch = tuple  # (left, right, gt, valid) tensors
Metric = Callable[[nn.Module, Batch], float]


@dataclass
class Direction:
    """Perturbation with the same structure as the model's named parameters."""

    tensors: dict[str, torch.Tensor]
    label: str = ""

    def flat(self) -> np.ndarray:
        return torch.cat([t.reshape(-1) for t in self.tensors.values()]).double().numpy()


@dataclass
class LandscapeGrid:
    """``losses[i, j]`` is the metric at ``alphas[i]``, ``betas[j]``; NaN marks failed cells."""

    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray
    center_loss: float


@dataclass
class TrajectoryProjection:
    """Snapshots projected onto the two leading PCA directions of ``theta_i - theta_n``."""

    epochs: list[int]
    coords: np.ndarray  # (n + 1, 2); last row is the final snapshot at the origin
    explained: np.ndarray  # fraction of the path's variation along each axis
    directions: np.ndarray  # (2, P) unit vectors
    degenerate: bool = False
    losses: list[float] = field(default_factory=list)


def _is_whole(name: str, tensor: torch.Tensor) -> bool:
    return tensor.dim() <= 1 or "relative_position_bias_table" in name


def _filter_norms(name: str, tensor: torch.Tensor) -> torch.Tensor:
    """Norm of each filter, broadcastable against ``tensor``.

    A filter is an output-channel slice of a conv kernel, a row of a linear
    weight, or the whole tensor for vectors and bias tables.
    """
    t = tensor.double()
    if _is_whole(name, tensor):
        return t.norm().reshape([1] * max(tensor.dim(), 1))
    return t.reshape(t.shape[0], -1).norm(dim=1).reshape([-1] + [1] * (tensor.dim() - 1))


def normalize_direction(direction: dict[str, torch.Tensor], params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Rescale every filter of ``direction`` to the norm of the matching parameter filter.

    Filters whose direction or parameter norm is zero become zero.
    """
    out = {}
    for name, d in direction.items():
        p = params[name]
        dn = _filter_norms(name, d)
        pn = _filter_norms(name, p)
        scale = torch.where(dn > 0, pn / torch.where(dn > 0, dn, torch.ones_like(dn)), torch.zeros_like(dn))
        out[name] = (d.double() * scale).to(p.dtype)
    return out


def _named_params(model_or_params) -> dict[str, torch.Tensor]:
    if isinstance(model_or_params, nn.Module):
        return {n: p.detach() for n, p in model_or_params.named_parameters()}
    return dict(model_or_params)


def random_direction(model_or_params, seed: int, label: str = "") -> Direction:
    """Gaussian direction with filter-wise normalization against the parameters."""
    params = _named_params(model_or_params)
    gen = torch.Generator().manual_seed(int(seed))
    raw = {n: torch.randn(p.shape, generator=gen, dtype=torch.float64) for n, p in params.items()}
    return Direction(normalize_direction(raw, params), label or f"seed{seed}")


def filter_norm_ratios(direction: Direction, model_or_params) -> np.ndarray:
    """``||d_f|| / ||theta_f||`` for every filter with non-zero parameter norm."""
    params = _named_params(model_or_params)
    ratios = []
    for name, d in direction.tensors.items():
        dn = _filter_norms(name, d).reshape(-1)
        pn = _filter_norms(name, params[name]).reshape(-1)
        keep = pn > 0
        ratios.append((dn[keep] / pn[keep]).numpy())
    return np.concatenate(ratios) if ratios else np.zeros(0)


def make_eval_batch(samples, n: int = 8, seed: int = 0) -> Batch:
    """Fixed batch of at most ``n`` samples chosen with a seeded permutation."""
    from .datasets import stack_batch

    rng = np.random.default_rng(seed)
    idx = sorted(rng.permutation(len(samples))[: min(n, len(samples))])
    return stack_batch([samples[i] for i in idx])


def loss_metric(model: nn.Module, batch: Batch) -> float:
    """Smooth-L1 training loss on ``batch`` in eval mode."""
    left, right, gt, valid = batch
    dmax = getattr(model, "dmax", None)
    if dmax is not None:
        valid = valid & (gt < dmax)
    model.eval()
    with torch.no_grad():
        return float(smooth_l1_loss(model(left, right), gt, valid))


def grid_axis(points: int = 41, extent: float = 1.0) -> np.ndarray:
    axis = np.linspace(-extent, extent, points)
    axis[np.abs(axis) < 1e-12] = 0.0
    return axis


def evaluate_landscape(
    model: nn.Module,
    eval_batch: Batch,
    delta: Direction,
    eta: Direction,
    alphas=None,
    betas=None,
    metric: Metric = loss_metric,
) -> LandscapeGrid:
    """Metric at ``theta* + alpha * delta + beta * eta`` over a grid.

    The model's parameters are restored bit-for-bit afterwards, also on error.
    """
    alphas = grid_axis() if alphas is None else np.asarray(alphas, dtype=np.float64)
    betas = grid_axis() if betas is None else np.asarray(betas, dtype=np.float64)
    named = dict(model.named_parameters())
    saved = {n: p.detach().clone() for n, p in named.items()}
    d1 = {n: delta.tensors[n].to(p.dtype) for n, p in saved.items()}
    d2 = {n: eta.tensors[n].to(p.dtype) for n, p in saved.items()}
    losses = np.full((len(alphas), len(betas)), np.nan)
    try:
        center = metric(model, eval_batch)
        for i, a in enumerate(alphas):
            for j, b in enumerate(betas):
                with torch.no_grad():
                    for n, p in named.items():
                        p.copy_(saved[n] + float(a) * d1[n] + float(b) * d2[n])
                try:
                    value = metric(model, eval_batch)
                except NumericError:
                    value = float("nan")
                losses[i, j] = value if math.isfinite(value) else np.nan
    finally:
        with torch.no_grad():
            for n, p in named.items():
                p.copy_(saved[n])
    return LandscapeGrid(alphas, betas, losses, center)


def pca_trajectory(snapshots: list[ParameterSnapshot]) -> TrajectoryProjection:
    """Project a training path onto its two most explanatory directions.

    Rows of ``M`` are ``theta_i - theta_n`` for every snapshot but the last
    (no further centering). The leading directions come from an eigen
    decomposition of the small ``M M^T`` Gram matrix.
    """
    if len(snapshots) < 3:
        raise ValueError(f"need at least 3 snapshots, got {len(snapshots)}")
    final = np.asarray(snapshots[-1].theta, dtype=np.float64)
    m = np.stack([np.asarray(s.theta, dtype=np.float64) - final for s in snapshots[:-1]])
    gram = m @ m.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = float(np.trace(gram))
    if total <= 0:
        raise ValueError("all snapshots are identical")
    degenerate = evals.size < 2 or evals[1] <= 1e-12 * evals[0]
    coords = np.zeros((len(snapshots), 2))
    directions = np.zeros((2, m.shape[1]))
    explained = np.zeros(2)
    for k in range(1 if degenerate else 2):
        s = math.sqrt(evals[k])
        u = evecs[:, k]
        if u[np.argmax(np.abs(u))] < 0:
            u = -u
        directions[k] = (m.T @ u) / s
        coords[:-1, k] = s * u
        explained[k] = evals[k] / total
    return TrajectoryProjection(
        epochs=[s.epoch for s in snapshots],
        coords=coords,
        explained=explained,
        directions=directions,
        degenerate=bool(degenerate),
        losses=[s.loss for s in snapshots],
    )


def _unflatten(vector: np.ndarray, model: nn.Module) -> dict[str, torch.Tensor]:
    out, offset = {}, 0
    for name, p in model.named_parameters():
        n = p.numel()
        out[name] = torch.from_numpy(np.asarray(vector[offset : offset + n])).reshape(p.shape).to(p.dtype)
        offset += n
    if offset != len(vector):
        raise ValueError(f"vector of length {len(vector)} does not match {offset} parameters")
    return out


def _span_axis(values: np.ndarray, points: int, margin: float) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    span = max(hi - lo, 1e-8)
    return np.linspace(lo - margin * span, hi + margin * span, points)


def trajectory_landscape(
    model: nn.Module,
    snapshots: list[ParameterSnapshot],
    eval_batch: Batch,
    points: int = 21,
    margin: float = 0.25,
    metric: Metric = loss_metric,
) -> tuple[LandscapeGrid, TrajectoryProjection]:
    """Loss over the PCA plane anchored at the final snapshot, plus the projected path.

    The grid covers the trajectory's extent on each axis padded by ``margin``.
    The model's own parameters are left unchanged.
    """
    proj = pca_trajectory(snapshots)
    named = dict(model.named_parameters())
    saved = {n: p.detach().clone() for n, p in named.items()}
    final = _unflatten(np.asarray(snapshots[-1].theta), model)
    d1 = Direction(_unflatten(proj.directions[0], model), "pca1")
    d2 = Direction(_unflatten(proj.directions[1], model), "pca2")
    try:
        with torch.no_grad():
            for n, p in named.items():
                p.copy_(final[n])
        grid = evaluate_landscape(
            model,
            eval_batch,
            d1,
            d2,
            _span_axis(proj.coords[:, 0], points, margin),
            _span_axis(proj.coords[:, 1], points, margin),
            metric,
        )
    finally:
        with torch.no_grad():
            for n, p in named.items():
                p.copy_(saved[n])
    return grid, proj


def _plot_surface(grid: LandscapeGrid, path: Path, proj: TrajectoryProjection | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    if min(grid.losses.shape) >= 2:
        z = np.ma.masked_invalid(grid.losses.T)
        cs = ax.contourf(grid.alphas, grid.betas, z, levels=30, cmap="viridis")
        fig.colorbar(cs, ax=ax)
    else:
        # a single row or column cannot be contoured
        a, b = np.meshgrid(grid.alphas, grid.betas, indexing="ij")
        ax.scatter(a.ravel(), b.ravel(), c=grid.losses.ravel(), cmap="viridis")
    if proj is not None:
        ax.plot(proj.coords[:, 0], proj.coords[:, 1], "o-", color="tab:blue", ms=3, lw=0.8)
        ax.set_xlabel(f"PC1 ({100 * proj.explained[0]:.1f}%)")
        ax.set_ylabel(f"PC2 ({100 * proj.explained[1]:.1f}%)")
    else:
        ax.set_xlabel("alpha")
        ax.set_ylabel("beta")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_path(proj: TrajectoryProjection, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(proj.coords[:, 0], proj.coords[:, 1], "o-", color="tab:blue", ms=3, lw=0.8)
    ax.set_xlabel(f"PC1 ({100 * proj.explained[0]:.1f}%)")
    ax.set_ylabel(f"PC2 ({100 * proj.explained[1]:.1f}%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def export_surface(obj, path, trajectory: TrajectoryProjection | None = None, image: bool = True) -> list[Path]:
    """Write a grid (``alpha,beta,loss``) or trajectory (``epoch,x,y``) as CSV.

    A PNG with the same stem is rendered next to it unless ``image`` is False.
    Passing ``trajectory`` with a grid overlays the path on the contour plot.
    """
    path = Path(path).with_suffix(".csv")
    written = [path]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if isinstance(obj, LandscapeGrid):
            writer.writerow(["alpha", "beta", "loss"])
            for i, a in enumerate(obj.alphas):
                for j, b in enumerate(obj.betas):
                    writer.writerow([repr(float(a)), repr(float(b)), repr(float(obj.losses[i, j]))])
        elif isinstance(obj, TrajectoryProjection):
            writer.writerow(["epoch", "x", "y"])
            for epoch, (x, y) in zip(obj.epochs, obj.coords):
                writer.writerow([epoch, repr(float(x)), repr(float(y))])
        else:
            raise TypeError(f"cannot export {type(obj).__name__}")
    if image:
        png = path.with_suffix(".png")
        if isinstance(obj, LandscapeGrid):
            _plot_surface(obj, png, trajectory)
        else:
            _plot_path(obj, png)
        written.append(png)
    return written
