"""Disparity, depth and view-warping accuracy metrics.

All metrics take float arrays plus an optional boolean mask of pixels to
score; invalid pixels never contribute.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import CameraRig, DepthMap, DisparityMap, crop_borders, disparity_to_depth, to_gray, warp_right_to_left

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
BAD_THRESHOLDS = (2.0, 3.0, 5.0)


def _errors(pred, gt, mask) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    valid = np.isfinite(gt) & np.isfinite(pred)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    return (pred - gt)[valid]


def epe(pred, gt, mask=None) -> float:
    """Mean absolute disparity error in pixels."""
    e = _errors(pred, gt, mask)
    return float(np.abs(e).mean()) if e.size else float("nan")


def rmse(pred, gt, mask=None) -> float:
    e = _errors(pred, gt, mask)
    return float(np.sqrt(np.mean(e**2))) if e.size else float("nan")


def bad_ratio(pred, gt, mask=None, t: float = 3.0) -> float:
    """Percentage of valid pixels whose absolute error exceeds ``t``."""
    e = _errors(pred, gt, mask)
    return float(100.0 * np.count_nonzero(np.abs(e) > t) / e.size) if e.size else float("nan")


@dataclass
class DisparityReport:
    epe: float
    rmse: float
    bad2: float
    bad3: float
    bad5: float
    n_pixels: int

    def to_json(self) -> dict:
        return asdict(self)


def disparity_report(pred, gt, mask=None) -> DisparityReport:
    e = np.abs(_errors(pred, gt, mask))
    if not e.size:
        nan = float("nan")
        return DisparityReport(nan, nan, nan, nan, nan, 0)
    bad = [float(100.0 * np.count_nonzero(e > t) / e.size) for t in BAD_THRESHOLDS]
    return DisparityReport(float(e.mean()), float(np.sqrt(np.mean(e**2))), *bad, int(e.size))


def depth_mae(pred_disp, gt_depth: DepthMap, rig: CameraRig, mask=None, use_cx_offset: bool = True) -> float:
    """Mean absolute depth error (mm) after triangulating the predicted disparity."""
    if not isinstance(pred_disp, DisparityMap):
        pred_disp = DisparityMap(pred_disp)
    z = disparity_to_depth(pred_disp, rig, use_cx_offset=use_cx_offset)
    valid = z.valid & gt_depth.valid
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        return float("nan")
    return float(np.abs(z.values[valid] - gt_depth.values[valid]).mean())


@dataclass
class DepthReport:
    mae_mm: float
    per_frame: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"mae_mm": self.mae_mm, "per_frame": self.per_frame}


def _gaussian_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable weighted window sums at every fully-inside window position."""
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Per-window SSIM for every window lying fully inside the image."""
    a, b = to_gray(a), to_gray(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}px on each side")
    g = _gaussian_1d()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, mask=None, data_range: float = 1.0) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5) on luma.

    With ``mask``, only windows whose pixels are all valid are averaged.
    """
    smap = ssim_map(a, b, data_range)
    if mask is None:
        return float(smap.mean())
    r = SSIM_WINDOW // 2
    inside = ndimage.minimum_filter(np.asarray(mask, dtype=np.uint8), size=SSIM_WINDOW, mode="constant")
    inside = inside[r:-r, r:-r].astype(bool)
    return float(smap[inside].mean()) if inside.any() else float("nan")


def psnr(a, b, mask=None, data_range: float = 1.0) -> float:
    """``10 log10(range^2 / MSE)``; identical inputs give ``PSNR_CAP_DB``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = (a - b) ** 2
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    if diff.size == 0:
        return float("nan")
    mse = float(diff.mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(data_range**2 / mse))


@dataclass
class WarpReport:
    mean_ssim: float
    mean_psnr: float
    per_pair: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"mean_ssim": self.mean_ssim, "mean_psnr": self.mean_psnr, "per_pair": self.per_pair}


# -- model-level evaluation -------------------------------------------------


def predict(model, sample) -> np.ndarray:
    """Full-resolution left disparity for one sample.

    ``model`` is a torch module taking ``(1, 3, H, W)`` tensors or any
    callable ``(left, right) -> (H, W) array`` on numpy images.
    """
    import torch

    if isinstance(model, torch.nn.Module):
        left = torch.from_numpy(np.ascontiguousarray(sample.left.transpose(2, 0, 1), dtype=np.float32))[None]
        right = torch.from_numpy(np.ascontiguousarray(sample.right.transpose(2, 0, 1), dtype=np.float32))[None]
        model.eval()
        with torch.no_grad():
            return model(left, right)[0].numpy().astype(np.float64)
    return np.asarray(model(sample.left, sample.right), dtype=np.float64)


def evaluate_warping(model, pairs) -> WarpReport:
    """Warp each right view by the predicted disparity and score it against the left.

    Scores are computed on in-bounds pixels only and averaged per pair.
    """
    rows = []
    for i, sample in enumerate(pairs):
        disp = DisparityMap(predict(model, sample))
        warped, valid = warp_right_to_left(sample.right, disp)
        rows.append(
            {
                "id": sample.id or str(i),
                "ssim": ssim(warped, sample.left, valid),
                "psnr": psnr(warped, sample.left, valid),
            }
        )
    if not rows:
        raise ValueError("no pairs to evaluate")
    return WarpReport(
        mean_ssim=float(np.nanmean([r["ssim"] for r in rows])),
        mean_psnr=float(np.nanmean([r["psnr"] for r in rows])),
        per_pair=rows,
    )


def evaluate_test19(model, dataset, crop_px: int = 100, non_occluded: bool = False) -> tuple[DisparityReport, list[dict]]:
    """Disparity metrics with ``crop_px`` columns removed on both sides.

    All valid ground-truth pixels are pooled across the dataset (occlusions
    included). ``non_occluded`` additionally drops pixels flagged in the
    sample's occlusion mask.

    Returns:
        The pooled report and one row of per-frame metrics per sample.
    """
    preds, gts, masks, frames = [], [], [], []
    for i, sample in enumerate(dataset):
        if sample.gt_disparity is None:
            raise ValueError(f"sample {sample.id or i} has no ground-truth disparity")
        pred = predict(model, sample)
        gt = sample.gt_disparity
        occ = sample.occlusion
        if crop_px:
            pred = crop_borders(pred, crop_px, crop_px)
            gt = crop_borders(gt, crop_px, crop_px)
            occ = None if occ is None else crop_borders(occ, crop_px, crop_px)
        mask = gt.valid.copy()
        if non_occluded and occ is not None:
            mask &= ~occ
        preds.append(pred[mask])
        gts.append(gt.values[mask])
        masks.append(mask)
        row = {"id": sample.id or str(i), "width": int(pred.shape[1])}
        row.update(disparity_report(pred, gt.values, mask).to_json())
        frames.append(row)
    if not frames:
        raise ValueError("empty dataset")
    report = disparity_report(np.concatenate(preds), np.concatenate(gts))
    return report, frames


def evaluate_depth(model, dataset, use_cx_offset: bool = True) -> DepthReport:
    """Mean absolute depth error over all jointly valid pixels, with per-frame MAE."""
    total, count = 0.0, 0
    per_frame = {}
    for i, sample in enumerate(dataset):
        if sample.gt_depth is None or sample.rig is None:
            raise ValueError(f"sample {sample.id or i} needs depth and calibration")
        z = disparity_to_depth(DisparityMap(predict(model, sample)), sample.rig, use_cx_offset)
        valid = z.valid & sample.gt_depth.valid
        err = np.abs(z.values[valid] - sample.gt_depth.values[valid])
        per_frame[sample.id or str(i)] = float(err.mean()) if err.size else float("nan")
        total += float(err.sum())
        count += int(err.size)
    return DepthReport(total / count if count else float("nan"), per_frame)


def write_report(report, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2))


def write_frames_csv(rows: list[dict], path) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
