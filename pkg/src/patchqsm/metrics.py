"""Reconstruction quality: normalized RMSE (percent), PSNR and 3D SSIM."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP = 999.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11^3 window
K1, K2 = 0.01, 0.03


@dataclass(frozen=True)
class MetricReport:
    method: str
    rmse: float
    ssim: float
    psnr: float

    def row(self) -> list[str]:
        return [self.method, f"{self.rmse:.2f}", f"{self.ssim:.4f}", f"{self.psnr:.2f}"]


def _pair(rec, gt, mask):
    rec = np.asarray(getattr(rec, "array", rec), dtype=np.float64)
    gt = np.asarray(getattr(gt, "array", gt), dtype=np.float64)
    if rec.shape != gt.shape:
        raise ValueError(f"dims mismatch: reconstruction {rec.shape} vs ground truth {gt.shape}")
    if mask is None:
        m = np.ones(gt.shape, dtype=bool)
    else:
        m = np.asarray(getattr(mask, "array", mask), dtype=bool)
        if m.shape != gt.shape:
            raise ValueError(f"mask dims {m.shape} do not match volume dims {gt.shape}")
    return rec, gt, m


def rmse_pct(rec, gt, mask=None) -> float:
    """``100 * ||rec - gt|| / ||gt||`` over the mask."""
    rec, gt, m = _pair(rec, gt, mask)
    ref = np.linalg.norm(gt[m])
    if ref == 0:
        raise ValueError("ground truth has zero norm on the mask")
    return float(100.0 * np.linalg.norm(rec[m] - gt[m]) / ref)


def masked_mse(rec, gt, mask=None) -> float:
    rec, gt, m = _pair(rec, gt, mask)
    diff = rec[m] - gt[m]
    return float(np.mean(diff * diff))


def psnr(rec, gt, mask=None) -> float:
    """PSNR with peak = ground-truth range on the mask; capped at 999 dB."""
    rec, gt, m = _pair(rec, gt, mask)
    mse = masked_mse(rec, gt, m)
    peak = float(gt[m].max() - gt[m].min())
    if mse == 0:
        return PSNR_CAP
    if peak == 0:
        return -PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def _gauss(x):
    return gaussian_filter(x, SSIM_SIGMA, mode="reflect", truncate=SSIM_RADIUS / SSIM_SIGMA)


def ssim_map(rec, gt, data_range: float) -> np.ndarray:
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mx, my = _gauss(rec), _gauss(gt)
    vx = _gauss(rec * rec) - mx * mx
    vy = _gauss(gt * gt) - my * my
    cxy = _gauss(rec * gt) - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim3d(rec, gt, mask=None, data_range: float | None = None) -> float:
    """Mean over the mask of the Gaussian-window (sigma 1.5, 11^3) SSIM map.

    ``data_range`` defaults to the ground-truth range on the mask; the
    volume edge is handled by half-sample reflection.
    """
    rec, gt, m = _pair(rec, gt, mask)
    if data_range is None:
        data_range = float(gt[m].max() - gt[m].min())
    return float(np.mean(ssim_map(rec, gt, data_range)[m]))


def evaluate(method: str, rec, gt, mask=None, data_range: float | None = None) -> MetricReport:
    """All three metrics; ``data_range`` is passed to :func:`ssim3d`."""
    return MetricReport(method, rmse_pct(rec, gt, mask), ssim3d(rec, gt, mask, data_range),
                        psnr(rec, gt, mask))


def write_report(reports, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "rmse", "ssim", "psnr"])
        for r in reports:
            writer.writerow(r.row())
    return path
