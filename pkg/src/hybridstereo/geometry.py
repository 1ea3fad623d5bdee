"""Disparity/depth maps, camera rigs and the geometric helpers built on them.

Disparity is always referenced to the left image: a left pixel at column ``x``
matches the right pixel at column ``x - d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


def _as_valid_mask(values: np.ndarray, valid: np.ndarray | None) -> np.ndarray:
    finite = np.isfinite(values)
    if valid is None:
        return finite
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != values.shape:
        raise ValueError(f"mask shape {valid.shape} != map shape {values.shape}")
    return valid & finite


@dataclass
class DisparityMap:
    """Left-referenced disparity in pixels with a per-pixel validity mask."""

    values: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"disparity must be 2D, got shape {self.values.shape}")
        self.valid = _as_valid_mask(self.values, self.valid) & (self.values >= 0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class DepthMap:
    """Depth in millimetres with a per-pixel validity mask."""

    values: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"depth must be 2D, got shape {self.values.shape}")
        self.valid = _as_valid_mask(self.values, self.valid) & (self.values > 0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


_UNIT_TO_MM = {"mm": 1.0, "m": 1000.0}


@dataclass(frozen=True)
class CameraRig:
    """Rectified stereo calibration.

    Args:
        fx: Focal length in pixels.
        baseline: Camera separation, in ``baseline_unit``.
        baseline_unit: ``"mm"`` or ``"m"``.
        cx_left: Principal point x of the left camera, pixels.
        cx_right: Principal point x of the right camera, pixels.
    """

    fx: float
    baseline: float
    baseline_unit: str = "mm"
    cx_left: float = 0.0
    cx_right: float = 0.0

    def __post_init__(self) -> None:
        numbers = (self.fx, self.baseline, self.cx_left, self.cx_right)
        if not all(math.isfinite(float(v)) for v in numbers):
            raise ConfigurationError(f"non-finite calibration: {self}")
        if self.fx <= 0 or self.baseline <= 0:
            raise ConfigurationError(f"fx and baseline must be positive: {self}")
        if self.baseline_unit not in _UNIT_TO_MM:
            raise ConfigurationError(f"unknown baseline unit {self.baseline_unit!r}")

    @property
    def baseline_mm(self) -> float:
        return float(self.baseline) * _UNIT_TO_MM[self.baseline_unit]

    @property
    def doffs(self) -> float:
        """Principal-point offset added to image disparity before triangulation."""
        return float(self.cx_right) - float(self.cx_left)

    def to_json(self) -> dict:
        return {
            "fx": float(self.fx),
            "baseline_mm": self.baseline_mm,
            "cx_left": float(self.cx_left),
            "cx_right": float(self.cx_right),
        }

    @classmethod
    def from_json(cls, data: dict) -> CameraRig:
        try:
            return cls(
                fx=float(data["fx"]),
                baseline=float(data["baseline_mm"]),
                cx_left=float(data.get("cx_left", 0.0)),
                cx_right=float(data.get("cx_right", 0.0)),
            )
        except KeyError as exc:
            raise ConfigurationError(f"calibration is missing field {exc}") from None


def disparity_to_depth(
    d: DisparityMap, rig: CameraRig, use_cx_offset: bool = True
) -> DepthMap:
    """Triangulate ``z = fx * B / d`` in millimetres.

    Pixels whose (offset-corrected) disparity is not strictly positive come out
    invalid.
    """
    offset = rig.doffs if use_cx_offset else 0.0
    disp = d.values + offset
    valid = d.valid & (disp > 0)
    depth = np.zeros_like(disp)
    depth[valid] = rig.fx * rig.baseline_mm / disp[valid]
    return DepthMap(depth, valid)


def depth_to_disparity(
    z: DepthMap, rig: CameraRig, use_cx_offset: bool = True
) -> DisparityMap:
    """Inverse of :func:`disparity_to_depth`."""
    offset = rig.doffs if use_cx_offset else 0.0
    valid = z.valid.copy()
    disp = np.zeros_like(z.values)
    disp[valid] = rig.fx * rig.baseline_mm / z.values[valid] - offset
    valid &= disp >= 0
    return DisparityMap(disp, valid)


def warp_right_to_left(
    right: np.ndarray, d: DisparityMap
) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruct the left view by sampling ``right`` at ``x - d(x, y)``.

    Sampling is bilinear (linear along the scanline, rows are integral).

    Returns:
        The warped image, same shape as ``right``, and a boolean mask that is
        False where the disparity is invalid or the sample falls outside the
        right image.
    """
    right = np.asarray(right, dtype=np.float64)
    h, w = right.shape[:2]
    if d.shape != (h, w):
        raise ValueError(f"image {right.shape[:2]} and disparity {d.shape} differ")
    xs = np.arange(w, dtype=np.float64)[None, :] - np.where(d.valid, d.values, 0.0)
    valid = d.valid & (xs >= 0) & (xs <= w - 1)
    xs = np.clip(xs, 0, w - 1)
    x0 = np.floor(xs).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    frac = xs - x0
    rows = np.arange(h)[:, None]
    if right.ndim == 3:
        frac = frac[..., None]
    out = (1.0 - frac) * right[rows, x0] + frac * right[rows, x1]
    out[~valid] = 0.0
    return out, valid


def crop_borders(obj, left_px: int, right_px: int):
    """Drop ``left_px`` columns on the left and ``right_px`` on the right.

    Works on plain image arrays (``H x W`` or ``H x W x C``), on
    :class:`DisparityMap` / :class:`DepthMap` (masks cropped identically) and on
    anything exposing a ``crop_borders`` method.
    """
    if left_px < 0 or right_px < 0:
        raise ValueError("crop amounts must be non-negative")
    if hasattr(obj, "crop_borders"):
        return obj.crop_borders(left_px, right_px)
    if isinstance(obj, (DisparityMap, DepthMap)):
        width = obj.shape[1]
    else:
        obj = np.asarray(obj)
        width = obj.shape[1]
    if width <= left_px + right_px:
        raise ValueError(f"cannot crop {left_px}+{right_px} px from width {width}")
    cols = slice(left_px, width - right_px)
    if isinstance(obj, (DisparityMap, DepthMap)):
        return type(obj)(obj.values[:, cols].copy(), obj.valid[:, cols].copy())
    return obj[:, cols].copy()


def to_gray(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma for colour images; grayscale passes through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[..., 0]
    return img[..., :3] @ np.array([0.299, 0.587, 0.114])
