"""Image quality metrics: PSNR, patch-averaged PSNR, SSIM and MSCN statistics.

Inputs are images in [0, 1]; every metric rescales to [0, 255] internally.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .kernelfield import gaussian_kernel
from .perceptual import luminance

MAX_I = 255.0
PSNR_CAP_DB = 100.0
PATCH = 8
SSIM_C1 = (0.01 * MAX_I) ** 2
SSIM_C2 = (0.03 * MAX_I) ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
MSCN_WINDOW = 7
MSCN_SIGMA = 7 / 6
MSCN_C = 1.0


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x * MAX_I, y * MAX_I


def _psnr_from_mse(mse):
    mse = np.asarray(mse, dtype=np.float64)
    with np.errstate(divide="ignore"):
        db = 10 * np.log10(MAX_I**2 / mse)
    return np.minimum(db, PSNR_CAP_DB)


def psnr(x, y) -> float:
    x, y = _pair(x, y)
    return float(_psnr_from_mse(np.mean((x - y) ** 2)))


def psnr_local(x, y, patch: int = PATCH) -> float:
    """Mean of the (capped) PSNR of every ``patch x patch`` window at stride 1."""
    x, y = _pair(x, y)
    if x.shape[0] < patch or x.shape[1] < patch:
        raise ValueError(f"image {x.shape[:2]} is smaller than the {patch}x{patch} patch")
    sq = (x - y) ** 2
    if sq.ndim == 3:
        channels = sq.shape[2]
        sq = sq.sum(axis=2)
    else:
        channels = 1
    windows = sliding_window_view(sq, (patch, patch))
    mse = windows.sum(axis=(2, 3)) / (patch * patch * channels)
    return float(_psnr_from_mse(mse).mean())


def ssim(x, y, windowed: bool = True) -> float:
    """SSIM on luminance.

    The default averages the per-window statistic over all valid 11x11
    Gaussian (sigma 1.5) windows; ``windowed=False`` uses global statistics.
    """
    x, y = _pair(x, y)
    lx, ly = luminance(x), luminance(y)
    if not windowed:
        mx, my = lx.mean(), ly.mean()
        vx, vy = lx.var(), ly.var()
        cxy = ((lx - mx) * (ly - my)).mean()
        return float(_ssim_formula(mx, my, vx, vy, cxy))
    k = min(SSIM_WINDOW, *lx.shape)
    k -= 1 - k % 2
    g = gaussian_kernel(k, SSIM_SIGMA)

    def filt(a):
        return np.einsum("hwij,ij->hw", sliding_window_view(a, (k, k)), g)

    mx, my = filt(lx), filt(ly)
    vx = filt(lx * lx) - mx * mx
    vy = filt(ly * ly) - my * my
    cxy = filt(lx * ly) - mx * my
    return float(_ssim_formula(mx, my, vx, vy, cxy).mean())


def _ssim_formula(mx, my, vx, vy, cxy):
    return ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / ((mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2))


def mscn(x) -> np.ndarray:
    """Mean-subtracted contrast-normalized coefficients of the luminance."""
    lum = luminance(np.asarray(x, dtype=np.float64) * MAX_I)
    # shift invariant; subtracting one pixel makes a constant image exactly zero
    lum = lum - lum.flat[0]
    g = gaussian_kernel(MSCN_WINDOW, MSCN_SIGMA)
    mu = ndimage.correlate(lum, g, mode="nearest")
    var = ndimage.correlate(lum * lum, g, mode="nearest") - mu * mu
    sigma = np.sqrt(np.abs(var))
    return (lum - mu) / (sigma + MSCN_C)


def mscn_summary(x) -> tuple[float, float]:
    c = mscn(x)
    return float(c.mean()), float(c.var())


@dataclass(frozen=True)
class QualityReport:
    psnr: float
    psnr_local: float
    ssim: float
    mscn_mean: float
    mscn_variance: float

    def as_dict(self) -> dict:
        return asdict(self)


def quality_report(x, reference) -> QualityReport:
    """Full-reference scores of ``x`` against ``reference`` plus MSCN stats of ``x``."""
    m, v = mscn_summary(x)
    return QualityReport(psnr(x, reference), psnr_local(x, reference), ssim(x, reference), m, v)
