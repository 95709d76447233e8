"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations are recorded on the active :class:`Tape` (entered as a context
manager) whenever at least one input requires a gradient. Outside a tape,
the same functions simply evaluate forward values, which is how inference
and the plain-numpy wrappers elsewhere in the package reuse them.

Example::

    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = dc.sum(dc.mul(x, x))
    grads = backward(tape, loss)
    grads[x.id]  # array([6.], dtype=float32)
"""

from __future__ import annotations

import contextlib
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

_ids = itertools.count()
_active_tapes: list["Tape"] = []
_dtype = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation."""


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the floating-point type of newly created tensors.

    Gradient checks run under ``precision(np.float64)`` so that central
    differences are not swamped by float32 rounding.
    """
    global _dtype
    saved, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = saved


class Tensor:
    """Immutable n-d array node, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "id", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=_dtype, order="C")
        self.data.flags.writeable = False
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    """One recorded operation: its inputs, output, and vector-Jacobian product."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of operations; records are appended in execution order,
    so every record's inputs were produced by earlier records (or are leaves)."""

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def _emit(kind: str, inputs: tuple[Tensor, ...], value: np.ndarray, vjp) -> Tensor:
    tracked = any(t.requires_grad for t in inputs) and bool(_active_tapes)
    out = Tensor(value, requires_grad=tracked)
    if tracked:
        _active_tapes[-1].records.append(Record(kind, inputs, out, vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Backpropagate from a scalar ``loss`` through ``tape``.

    Returns a map from tensor id to gradient for every tracked tensor that the
    loss depends on; leaf tensors also get their ``.grad`` attribute set.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    produced = set()
    for rec in reversed(tape.records):
        produced.add(rec.output.id)
        g = grads.get(rec.output.id)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.data.dtype)
            if gi.shape != inp.shape:
                raise ShapeError(f"{rec.kind}: gradient shape {gi.shape} != input shape {inp.shape}")
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
    for rec in tape.records:
        for inp in rec.inputs:
            if inp.requires_grad and inp.id not in produced and inp.id in grads:
                inp.grad = grads[inp.id]
    return grads


# ---------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit("scale", (a,), a.data * _dtype(c), lambda g: (g * _dtype(c),))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    value = a.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), np.asarray(value), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        value = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _emit("reshape", (a,), value, lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _emit("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _emit("relu", (a,), np.where(on, a.data, 0), lambda g: (g * on,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _emit("sigmoid", (a,), s, lambda g: (g * s * (1 - s),))


def clamp01(a) -> Tensor:
    """Clip to [0, 1]; gradient passes unchanged inside the interval, zero outside."""
    a = as_tensor(a)
    inside = (a.data >= 0) & (a.data <= 1)
    return _emit("clamp01", (a,), np.clip(a.data, 0, 1), lambda g: (g * inside,))


def l2_norm(a) -> Tensor:
    """Squared Euclidean norm of all entries, sum(a**2)."""
    a = as_tensor(a)
    return _emit("l2_norm", (a,), np.asarray((a.data * a.data).sum()), lambda g: (2 * g * a.data,))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), p, vjp)


def cross_entropy(logits, labels, reduction: str = "mean", smoothing: float = 0.0) -> Tensor:
    """Softmax cross-entropy of ``(N, K)`` logits against integer labels.

    ``smoothing`` mixes the one-hot target with the uniform distribution.
    ``reduction="sum"`` keeps per-sample gradients unscaled, which is what the
    batched attack relies on.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: label out of range for {k} classes")
    target = np.full((n, k), smoothing / k, dtype=logits.data.dtype)
    target[np.arange(n), labels] += 1 - smoothing
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    denom = n if reduction == "mean" else 1
    value = np.asarray(-(target * logp).sum() / denom)

    def vjp(g):
        return ((np.exp(logp) - target) * (g / denom),)

    return _emit("cross_entropy", (logits,), value, vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data,
                 lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW layout)


def _correlate_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1 cross-correlation with zero "same" padding.

    x: (N, C, H, W); w: (O, C, k, k) with k odd. Returns (N, O, H, W).
    """
    k = w.shape[-1]
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    return np.einsum("nchwij,ocij->nohw", cols, w, optimize=True)


def conv2d(x, w) -> Tensor:
    """Same-padded stride-1 convolution of ``(N, C, H, W)`` by ``(O, C, k, k)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    k = w.shape[-1]
    r = k // 2

    def vjp(g):
        gx = _correlate_same(g, w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        xp = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r)))
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))
        gw = np.einsum("nohw,nchwij->ocij", g, cols, optimize=True)
        return gx, gw

    return _emit("conv2d", (x, w), _correlate_same(x.data, w.data), vjp)


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2 over the last two axes."""
    x = as_tensor(x)
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {x.shape}")
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    value = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, h // 2, w // 2, 2, 2)
        return (np.moveaxis(gb, -2, -3).reshape(x.shape),)

    return _emit("maxpool2", (x,), value, vjp)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    kinks: np.ndarray  # bool mask of coordinates at non-differentiable points
    tol: float

    @property
    def passed(self) -> bool:
        ok = self.rel_error[~self.kinks]
        return bool(np.all(ok <= self.tol))

    @property
    def max_rel_error(self) -> float:
        ok = self.rel_error[~self.kinks]
        return float(ok.max()) if ok.size else 0.0


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-3, tol: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn`` against central differences.

    Runs in float64. Where the one-sided slopes at step ``h`` disagree, the
    difference is redone at ``h / 16``. Curvature shrinks the disagreement
    in proportion to the step; a relu or clamp corner right at the point does
    not, so such coordinates are flagged as kinks and excluded. A corner
    farther than ``h / 16`` away only spoils the coarse step, and the fine
    difference is used instead.
    """
    fine = h / 16
    with precision(np.float64):
        x0 = np.array(point, dtype=np.float64)
        x = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            out = fn(x)
        analytic = backward(tape, out).get(x.id, np.zeros_like(x0)).reshape(-1)

        def f(v):
            return float(fn(Tensor(v.reshape(x0.shape))).data)

        flat = x0.reshape(-1)
        f0 = f(flat)
        numeric = np.empty_like(flat)
        kinks = np.zeros(flat.shape, dtype=bool)
        for i in range(flat.size):
            def at(d):
                v = flat.copy()
                v[i] += d
                return f(v)

            fp, fm = at(h), at(-h)
            numeric[i] = (fp - fm) / (2 * h)
            gap = abs((fp - f0) - (f0 - fm)) / h
            if gap > 1e-6:
                fp, fm = at(fine), at(-fine)
                numeric[i] = (fp - fm) / (2 * fine)
                gap_fine = abs((fp - f0) - (f0 - fm)) / fine
                kinks[i] = gap_fine > max(1e-6, gap / 8)
    if kinks.any():
        logger.debug("grad_check: %d non-differentiable coordinate(s) excluded", int(kinks.sum()))
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric), kinks, tol)
