"""Concatenation feature volume, soft-argmax projection and disparity upsampling."""

import torch
import torch.nn.functional as F

from .errors import NumericError


def build_feature_volume(
    f_left: torch.Tensor, f_right: torch.Tensor, d_bins: int
) -> torch.Tensor:
    """Stack left features with right features shifted along the epipolar line.

    Args:
        f_left: ``(B, C, H, W)`` left features.
        f_right: ``(B, C, H, W)`` right features.
        d_bins: Number of disparity candidates at feature resolution.

    Returns:
        ``(B, 2C, d_bins, H, W)`` volume. For candidate ``d`` the first ``C``
        channels hold ``f_left[..., x]`` and the last ``C`` hold
        ``f_right[..., x - d]``; columns ``x < d`` of the right half are zero.
    """
    if f_left.shape != f_right.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_left.shape)} vs {tuple(f_right.shape)}")
    if d_bins < 1:
        raise ValueError(f"d_bins must be >= 1, got {d_bins}")
    width = f_left.shape[-1]
    shifted = []
    for d in range(d_bins):
        if d == 0:
            shifted.append(f_right)
        elif d >= width:
            shifted.append(torch.zeros_like(f_right))
        else:
            shifted.append(F.pad(f_right[..., : width - d], (d, 0)))
    right = torch.stack(shifted, dim=2)
    left = f_left.unsqueeze(2).expand(-1, -1, d_bins, -1, -1)
    return torch.cat([left, right], dim=1)


def soft_argmax_projection(cost: torch.Tensor) -> torch.Tensor:
    """Expected disparity bin under ``softmax(-cost)`` along dim 1.

    Args:
        cost: ``(B, D, H, W)`` matching cost, lower is better.

    Returns:
        ``(B, H, W)`` disparity in bin units, bounded in ``[0, D - 1]``.
    """
    if not torch.isfinite(cost).all():
        raise NumericError("cost volume contains non-finite values")
    prob = F.softmax(-cost, dim=1)
    bins = torch.arange(cost.shape[1], dtype=cost.dtype, device=cost.device)
    return torch.einsum("bdhw,d->bhw", prob, bins)


def upsample_disparity(
    disp: torch.Tensor, factor: int = 3, size: tuple[int, int] | None = None
) -> torch.Tensor:
    """Bilinearly upsample a ``(B, H, W)`` coarse map and rescale it to pixels.

    ``size`` defaults to ``(factor * H, factor * W)``. Sampling uses half-pixel
    centres (``align_corners=False``).
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if size is None:
        size = (disp.shape[-2] * factor, disp.shape[-1] * factor)
    if factor == 1 and tuple(size) == tuple(disp.shape[-2:]):
        return disp
    up = F.interpolate(disp.unsqueeze(1), size=size, mode="bilinear", align_corners=False)
    return up.squeeze(1) * factor
