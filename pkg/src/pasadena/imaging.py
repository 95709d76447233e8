"""Images as ``(H, W, C)`` float32 arrays in [0, 1], binary PPM/PGM I/O,
and the noise injectors (gaussian, shot, impulse, speckle)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

NOISE_KINDS = ("gaussian", "shot", "impulse", "speckle")
DEFAULT_PHOTON_SCALE = 60.0


class ImageFormatError(ValueError):
    pass


def as_image(x) -> np.ndarray:
    """Validate and return ``x`` as an ``(H, W, C)`` float32 image, C in {1, 3}."""
    img = np.asarray(x, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected an (H, W, 1|3) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min(initial=0) < 0 or img.max(initial=0) > 1:
        raise ValueError("image values must be finite and lie in [0, 1]")
    return img


def to_bytes8(img: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(img, dtype=np.float64) * 255).astype(np.uint8)


def from_bytes8(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / np.float32(255)).astype(np.float32)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid, i.e. the value a PPM round trip would give."""
    return from_bytes8(to_bytes8(img))


def rng_for(seed: int, index: int = 0) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, index)``; independent of call order."""
    key = np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# Netpbm


def _parse_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, payload offset) for a binary netpbm file."""
    if len(data) < 2:
        raise ImageFormatError("truncated header")
    found = data[:2]
    if found != magic:
        if found[:1] == b"P" and found[1:2].isdigit():
            raise ImageFormatError(f"unsupported {'PPM' if magic == b'P6' else 'PGM'} variant {found.decode()}")
        raise ImageFormatError(f"bad magic {found!r}, expected {magic.decode()}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed header: expected an integer field")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("malformed header: missing whitespace before payload")
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}, only 255 is accepted")
    return width, height, maxval, pos + 1


def _load(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    width, height, _, offset = _parse_header(data, magic)
    need = width * height * channels
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return from_bytes8(raw)


def load_ppm(data: bytes) -> np.ndarray:
    """Parse a binary P6 file (maxval 255) into an ``(H, W, 3)`` image."""
    return _load(data, b"P6", 3)


def save_ppm(img) -> bytes:
    img = as_image(img)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + to_bytes8(img).tobytes()


def load_pgm(data: bytes) -> np.ndarray:
    """Parse a binary P5 file (maxval 255) into an ``(H, W, 1)`` image."""
    return _load(data, b"P5", 1)


def save_pgm(img) -> bytes:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise ValueError("PGM needs a single-channel image")
        img = img[:, :, 0]
    img = as_image(img)
    h, w, _ = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + to_bytes8(img).tobytes()


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    return load_pgm(data) if data[:2] == b"P5" else load_ppm(data)


def write_image(path, img) -> None:
    img = as_image(img)
    with open(path, "wb") as f:
        f.write(save_pgm(img) if img.shape[2] == 1 else save_ppm(img))


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseSpec:
    """``strength`` is sigma (gaussian, speckle), photon scale (shot) or
    per-pixel rate (impulse)."""

    kind: str
    strength: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {', '.join(NOISE_KINDS)}")
        if self.strength < 0:
            raise ValueError("noise strength must be non-negative")


def add_noise(img, spec: NoiseSpec, index: int = 0) -> np.ndarray:
    """Return a noisy copy of ``img``; ``index`` selects the per-image stream."""
    img = as_image(img)
    rng = rng_for(spec.seed, index)
    x = img.astype(np.float64)
    s = spec.strength
    if spec.kind == "gaussian":
        if s == 0:
            return img.copy()
        out = x + rng.normal(0.0, s, size=x.shape)
    elif spec.kind == "speckle":
        if s == 0:
            return img.copy()
        out = x + x * rng.normal(0.0, s, size=x.shape)
    elif spec.kind == "shot":
        if s <= 0:
            raise ValueError("shot noise needs a positive photon scale")
        out = rng.poisson(x * s) / s
    else:
        if s > 1:
            raise ValueError("impulse rate must lie in [0, 1]")
        u = rng.random(size=x.shape[:2])
        out = x.copy()
        out[u < s / 2] = 0.0
        out[(u >= s / 2) & (u < s)] = 1.0
    return np.clip(out, 0.0, 1.0).astype(np.float32)
