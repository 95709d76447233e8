"""Per-pixel kernel filtering.

Every pixel p of an image is replaced by a weighted sum of its K x K
neighbourhood, with weights taken from p's own kernel. A kernel field is
stored as ``(H, W, K, K)``; entry ``[y, x, i, j]`` weights the neighbour at
``(y + i - K//2, x + j - K//2)``. Borders are handled by edge replication and
one kernel is shared by all colour channels.

The tape-level helpers (``mixed_filter`` etc.) accept tensors with an optional
leading batch axis so that many images can be attacked in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import diffcore as dc
from .imaging import as_image


@dataclass(frozen=True)
class KernelField:
    weights: np.ndarray  # (H, W, K, K)
    normalized: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError(f"kernel field must be (H, W, K, K), got {w.shape}")
        if w.shape[2] % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {w.shape[2]}")
        if self.normalized and not np.allclose(w.sum(axis=(2, 3)), 1, atol=1e-5):
            raise ValueError("field marked normalized but kernels do not sum to 1")
        object.__setattr__(self, "weights", w)

    @property
    def ksize(self) -> int:
        return self.weights.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape[:2]

    def flat(self) -> np.ndarray:
        """Kernels as ``(H, W, K*K)``."""
        h, w, k, _ = self.weights.shape
        return self.weights.reshape(h, w, k * k)

    def to_bytes(self) -> bytes:
        """Debug dump: ksize u32, height u32, width u32, then f32 weights, all little-endian."""
        h, w, k, _ = self.weights.shape
        head = np.array([k, h, w], dtype="<u4").tobytes()
        return head + self.weights.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, normalized: bool = False) -> "KernelField":
        if len(data) < 12:
            raise ValueError("truncated kernel field header")
        k, h, w = np.frombuffer(data[:12], dtype="<u4")
        need = int(h) * int(w) * int(k) * int(k) * 4
        if len(data) - 12 != need:
            raise ValueError(f"kernel field payload is {len(data) - 12} bytes, expected {need}")
        weights = np.frombuffer(data[12:], dtype="<f4").reshape(int(h), int(w), int(k), int(k))
        return cls(weights.astype(np.float32), normalized)


def gaussian_kernel(ksize: int, sigma: float) -> np.ndarray:
    if ksize < 1 or ksize % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {ksize}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = ksize // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def gaussian_field(h: int, w: int, ksize: int = 5, sigma: float = 1.0) -> KernelField:
    """Same normalized Gaussian kernel at every pixel: a plain Gaussian denoiser."""
    k = gaussian_kernel(ksize, sigma).astype(np.float32)
    # renormalize after the float32 cast
    k = k / k.sum(dtype=np.float32)
    return KernelField(np.broadcast_to(k, (h, w, ksize, ksize)).copy(), normalized=True)


def identity_field(h: int, w: int, ksize: int = 5) -> KernelField:
    k = np.zeros((ksize, ksize), dtype=np.float32)
    k[ksize // 2, ksize // 2] = 1
    return KernelField(np.broadcast_to(k, (h, w, ksize, ksize)).copy(), normalized=True)


def neighborhoods(img: np.ndarray, ksize: int) -> np.ndarray:
    """Edge-replicated neighbourhoods of ``(..., H, W, C)`` as ``(..., H, W, K*K, C)``."""
    img = np.asarray(img, dtype=np.float32)
    r = ksize // 2
    pad = [(0, 0)] * (img.ndim - 3) + [(r, r), (r, r), (0, 0)]
    padded = np.pad(img, pad, mode="edge")
    win = sliding_window_view(padded, (ksize, ksize), axis=(-3, -2))  # ..., H, W, C, K, K
    *lead, h, w, c, _, _ = win.shape
    return np.ascontiguousarray(np.moveaxis(win.reshape(*lead, h, w, c, ksize * ksize), -1, -2))


def filter_patches(patches, kernels, clamp: bool = True) -> dc.Tensor:
    """Tape op: ``out[..., p, c] = sum_q patches[..., p, q, c] * kernels[..., p, q]``."""
    kernels = dc.as_tensor(kernels)
    out = dc.sum(dc.mul(patches, dc.reshape(kernels, kernels.shape + (1,))), axis=-2)
    return dc.clamp01(out) if clamp else out


def mixed_kernels(mask, ka, kn) -> dc.Tensor:
    """Tape op: per-pixel blend ``M * ka + (1 - M) * kn`` with M of shape ``(..., H, W)``."""
    mask = dc.as_tensor(mask)
    m = dc.reshape(mask, mask.shape + (1,))
    return dc.add(kn, dc.mul(m, dc.sub(ka, kn)))


def mixed_filter(patches, mask, ka, kn, clamp: bool = True) -> dc.Tensor:
    return filter_patches(patches, mixed_kernels(mask, ka, kn), clamp)


def kernel_distance(ka, kn) -> dc.Tensor:
    """Tape op: mean over pixels of the squared L2 distance between kernels.

    With a leading batch axis the per-image means are summed, so each image's
    gradient is the same as if it were processed alone.
    """
    ka = dc.as_tensor(ka)
    pixels = ka.shape[-3] * ka.shape[-2]
    return dc.scale(dc.l2_norm(dc.sub(ka, kn)), 1.0 / pixels)


def _check(img: np.ndarray, *fields: KernelField) -> None:
    for f in fields:
        if f.shape != img.shape[:2]:
            raise ValueError(f"kernel field {f.shape} does not match image {img.shape[:2]}")
    if len({f.ksize for f in fields}) > 1:
        raise ValueError("kernel fields have different kernel sizes")


def apply_kernels(img, field: KernelField, clamp: bool = True) -> np.ndarray:
    img = as_image(img)
    _check(img, field)
    return filter_patches(neighborhoods(img, field.ksize), field.flat(), clamp).numpy()


def mix_apply(img, mask, ka: KernelField, kn: KernelField, clamp: bool = True) -> np.ndarray:
    img = as_image(img)
    _check(img, ka, kn)
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape != img.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {img.shape[:2]}")
    return mixed_filter(neighborhoods(img, ka.ksize), mask, ka.flat(), kn.flat(), clamp).numpy()


def kernel_l2(ka: KernelField, kn: KernelField) -> float:
    if ka.weights.shape != kn.weights.shape:
        raise ValueError(f"kernel fields differ in shape: {ka.weights.shape} vs {kn.weights.shape}")
    return kernel_distance(ka.flat(), kn.flat()).item()
