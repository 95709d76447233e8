"""Edge-guided attack mask.

Edges are found with a classic Canny pipeline at several blur scales, dilated
into bands, and linearly combined with learnable per-scale weights; a steep
sigmoid around a threshold turns the combination into a [0, 1] mask that
selects the pixels to attack (mask near 1) versus denoise (near 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import diffcore as dc

LUMA = np.array([0.299, 0.587, 0.114])


def luminance(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[-1] == 1:
        return img[..., 0]
    return img @ LUMA


def canny(img, low: float = 0.1, high: float = 0.2, sigma: float = 1.0) -> np.ndarray:
    """Binary Canny edge map of ``img`` as float32 {0, 1}.

    ``low`` and ``high`` are hysteresis thresholds given as fractions of the
    maximum gradient magnitude; ``sigma`` is the Gaussian smoothing width.
    """
    if not 0 < low < high <= 1:
        raise ValueError(f"need 0 < low < high <= 1, got low={low}, high={high}")
    lum = luminance(img)
    smooth = ndimage.gaussian_filter(lum, sigma, mode="nearest") if sigma > 0 else lum
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-12:
        return np.zeros(lum.shape, dtype=np.float32)
    mag = mag / peak
    thin = _non_max_suppression(mag, gx, gy)
    strong = thin >= high
    weak = thin >= low
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels].astype(np.float32)


# neighbour offsets (dy, dx) along the gradient for the four quantized directions
_DIRECTIONS = ((0, 1), (1, 1), (1, 0), (1, -1))


def _non_max_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    # ties along the gradient keep the pixel on the positive side, so a
    # symmetric ramp yields a single-pixel line
    tol = 1e-7
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180
    sector = (np.floor((angle + 22.5) / 45).astype(int)) % 4
    h, w = mag.shape
    padded = np.pad(mag, 1)
    out = np.zeros_like(mag)
    for s, (dy, dx) in enumerate(_DIRECTIONS):
        fwd = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        back = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        keep = (sector == s) & (mag > fwd + tol) & (mag >= back - tol)
        out[keep] = mag[keep]
    return out


def dilate(edges: np.ndarray, width: int) -> np.ndarray:
    if width < 1 or width % 2 == 0:
        raise ValueError(f"dilation width must be odd and >= 1, got {width}")
    if width == 1:
        return edges.astype(np.float32)
    return ndimage.binary_dilation(edges > 0, structure=np.ones((width, width), dtype=bool)).astype(np.float32)


@dataclass(frozen=True)
class EdgeStack:
    maps: np.ndarray  # (L, H, W) in {0, 1}
    scales: tuple[float, ...]
    dilation: int = 1

    @property
    def levels(self) -> int:
        return self.maps.shape[0]


def multi_scale_edges(img, levels: int = 3, dilation: int = 3, low: float = 0.1, high: float = 0.2) -> EdgeStack:
    """Canny at blur scales 1, 2, 4, ... each dilated by a ``dilation`` square."""
    if levels < 1:
        raise ValueError("need at least one scale")
    scales = tuple(float(2**i) for i in range(levels))
    maps = np.stack([dilate(canny(img, low, high, sigma=s), dilation) for s in scales])
    return EdgeStack(maps, scales, dilation)


@dataclass(frozen=True)
class CannyEdges:
    """Default edge provider."""

    levels: int = 3
    dilation: int = 3
    low: float = 0.1
    high: float = 0.2

    def __call__(self, img) -> EdgeStack:
        return multi_scale_edges(img, self.levels, self.dilation, self.low, self.high)


@dataclass(frozen=True)
class MaskConfig:
    theta: float = 0.45
    gain: float = 100.0

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("mask gain must be positive")


def init_scale_weights(levels: int, rng: np.random.Generator) -> np.ndarray:
    """Random weights in [0, 1] that sum to 1."""
    w = rng.random(levels) + 1e-12
    return (w / w.sum()).astype(np.float32)


def mask_tensor(edges, weights, theta: float, gain: float) -> dc.Tensor:
    """Tape op: ``sigmoid(gain * (sum_i w_i E_i - theta))``.

    ``edges`` is ``(..., L, H, W)`` and ``weights`` ``(..., L)``.
    """
    weights = dc.as_tensor(weights)
    edges = dc.as_tensor(edges)
    if weights.shape[-1] != edges.shape[-3]:
        raise dc.ShapeError(f"{weights.shape[-1]} scale weights for {edges.shape[-3]} edge maps")
    w = dc.reshape(weights, weights.shape + (1, 1))
    combined = dc.sum(dc.mul(edges, w), axis=-3)
    return dc.sigmoid(dc.scale(dc.sub(combined, theta), gain))


def weight_map(stack: EdgeStack, weights, cfg: MaskConfig = MaskConfig()) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float32)
    if weights.shape != (stack.levels,):
        raise ValueError(f"expected {stack.levels} scale weights, got shape {weights.shape}")
    return mask_tensor(stack.maps, weights, cfg.theta, cfg.gain).numpy()
