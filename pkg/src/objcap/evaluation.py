"""Image metrics and the evaluation report.

PSNR assumes [0, 1] images and caps at 99 dB for exact matches. SSIM is
the Gaussian-window variant (11x11, sigma 1.5, K1=0.01, K2=0.03,
population covariance), averaged over channels, with the filter-radius
border cropped before the mean. MMSE scores the rendered attenuation map
against the binary object mask.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP = 99.0
_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5      # 11x11 window
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03

REPORT_COLUMNS = ("name", "mode", "psnr", "masked_psnr", "ssim", "mmse",
                  "fmse", "runtime")


def _check_pair(a, b, name_a="pred", name_b="gt"):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name_a} shape {a.shape} != {name_b} shape {b.shape}")
    return a, b


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check_pair(pred, gt)
    mse = float(((pred - gt) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def masked_psnr(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """PSNR restricted to pixels where the mask is set."""
    pred, gt = _check_pair(pred, gt)
    m = np.asarray(mask, dtype=bool)
    if m.shape != pred.shape[:m.ndim]:
        raise ValueError(f"mask shape {m.shape} does not match {pred.shape}")
    if not m.any():
        raise ValueError("mask selects no pixels")
    mse = float(((pred[m] - gt[m]) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _ssim_channel(x: np.ndarray, y: np.ndarray) -> float:
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    blur = lambda a: gaussian_filter(a, _SSIM_SIGMA, truncate=_SSIM_TRUNCATE)
    ux, uy = blur(x), blur(y)
    uxx, uyy, uxy = blur(x * x), blur(y * y), blur(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    s = ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) \
        / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    pad = int(_SSIM_TRUNCATE * _SSIM_SIGMA + 0.5)
    return float(s[pad:-pad, pad:-pad].mean())


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean SSIM; (H, W) or (H, W, C) in [0, 1]."""
    pred, gt = _check_pair(pred, gt)
    win = 2 * int(_SSIM_TRUNCATE * _SSIM_SIGMA + 0.5) + 1
    if min(pred.shape[0], pred.shape[1]) < win:
        raise ValueError(f"image smaller than the {win}x{win} SSIM window")
    if pred.ndim == 2:
        return _ssim_channel(pred, gt)
    if pred.ndim == 3:
        return float(np.mean([_ssim_channel(pred[..., c], gt[..., c])
                              for c in range(pred.shape[-1])]))
    raise ValueError(f"expected 2-D or 3-D image, got shape {pred.shape}")


def mmse(alpha: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error between the attenuation map and the binary mask."""
    a = np.asarray(alpha, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if a.shape != m.shape:
        raise ValueError(f"alpha shape {a.shape} != mask shape {m.shape}")
    return float(((a - m) ** 2).mean())


def metrics(pred: np.ndarray, gt: np.ndarray, alpha=None, mask=None,
            name: str = "", mode: str = "") -> dict:
    """One report row. alpha and mask are optional together; masked PSNR
    needs the mask, MMSE needs both."""
    row = {"name": name, "mode": mode,
           "psnr": psnr(pred, gt), "ssim": ssim(pred, gt),
           "masked_psnr": "", "mmse": "", "fmse": "", "runtime": ""}
    if mask is not None:
        row["masked_psnr"] = masked_psnr(pred, gt, np.asarray(mask, dtype=bool))
        if alpha is not None:
            row["mmse"] = mmse(alpha, np.asarray(mask, dtype=np.float64))
    return row


def write_report(path, rows, scene: dict | None = None) -> Path:
    """CSV report: one row per image, plus an optional scene summary row
    carrying scene-level values (FMSE, runtime)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in REPORT_COLUMNS})
        if scene is not None:
            w.writerow({**{k: "" for k in REPORT_COLUMNS},
                        "name": "scene", "mode": "summary",
                        **{k: scene[k] for k in scene}})
    return path


def read_report(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
