"""Adversarial denoise attack and the FGSM baseline.

The attack filters a noisy image with per-pixel kernels. Pixels where the
edge mask is low keep the denoising kernel; pixels where it is high use an
adversarial kernel. Adversarial kernels and the per-scale edge weights are
moved by plain gradient ascent on

    lam * CE(model(filtered), y) - gam * mean_p ||ka_p - kn_p||^2

until the model's label changes or the iteration budget runs out.

``pasadena_attack_batch`` runs many images on one tape. Every term of the
objective is a per-image sum, so each image's gradients, and therefore its
trajectory, match what it would get alone.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .classifier import Classifier, loss_and_grad, predict_labels
from .imaging import as_image, rng_for
from .kernelfield import KernelField, gaussian_field, kernel_distance, mixed_filter, neighborhoods
from .metrics import QualityReport, quality_report
from .perceptual import CannyEdges, EdgeStack, init_scale_weights, mask_tensor

logger = logging.getLogger(__name__)

EdgeProvider = Callable[[np.ndarray], EdgeStack]
DenoiseProvider = Callable[[np.ndarray], KernelField]


@dataclass(frozen=True)
class GaussianDenoiser:
    """Default denoise provider: the same normalized Gaussian kernel everywhere."""

    ksize: int = 5
    sigma: float = 1.0

    def __call__(self, img) -> KernelField:
        return gaussian_field(img.shape[0], img.shape[1], self.ksize, self.sigma)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: int = 5
    lam: float = 0.9
    theta: float = 0.45
    alpha: float = 0.1
    iterations: int = 10
    gain: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise ValueError("lambda must be in (0,1]")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.epsilon < 1 or self.epsilon % 2 == 0:
            raise ValueError("epsilon (kernel size) must be odd and >= 1")
        if self.gain <= 0:
            raise ValueError("gain must be positive")

    @property
    def gamma(self) -> float:
        return 1.0 - self.lam

    def as_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["gamma"] = self.gamma
        return d


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: bool
    iterations: int
    y: int
    final_label: int
    mask: np.ndarray
    scale_weights: np.ndarray
    objective_trace: list[float]
    config: AttackConfig
    aborted: bool = False
    metrics: dict[str, QualityReport] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "success": self.success,
            "iterations": self.iterations,
            "y": self.y,
            "final_label": self.final_label,
            "aborted": self.aborted,
            "objective_trace": [float(v) for v in self.objective_trace],
            "scale_weights": [float(v) for v in self.scale_weights],
            "metrics": {k: v.as_dict() for k, v in self.metrics.items()},
            "config": self.config.as_dict(),
        }


def objective(patches, mask, ka, kn, model: Classifier, y, lam: float, gamma: float) -> dc.Tensor:
    """Tape op: ``lam * CE(model(mix filter)) - gamma * kernel distance``, summed over a batch.

    ``patches`` is ``(B, H, W, N, C)``; ``mask`` ``(B, H, W)``; kernels ``(B, H, W, N)``.
    """
    filtered = mixed_filter(patches, mask, ka, kn)
    ce = dc.cross_entropy(model.forward(filtered), y, reduction="sum")
    return dc.sub(dc.scale(ce, lam), dc.scale(kernel_distance(ka, kn), gamma))


def _mixed_forward(patches, edges, w, ka, kn, cfg: AttackConfig):
    mask = mask_tensor(edges, w, cfg.theta, cfg.gain)
    return mixed_filter(patches, mask, ka, kn).numpy(), mask.numpy()


def pasadena_attack_batch(images, model: Classifier, edge_provider: EdgeProvider | None = None,
                          denoise_provider: DenoiseProvider | None = None, cfg: AttackConfig = AttackConfig(),
                          indices=None, labels=None) -> list[AttackResult]:
    """Attack a batch ``(B, H, W, C)`` of noisy images.

    ``indices`` key the per-image RNG streams (default ``0..B-1``) so results
    do not depend on how a larger set is chunked. ``labels`` overrides the
    target labels, which otherwise are the model's predictions on the inputs.
    """
    edge_provider = edge_provider or CannyEdges()
    denoise_provider = denoise_provider or GaussianDenoiser(cfg.epsilon)
    images = np.stack([as_image(x) for x in images])
    b = len(images)
    indices = np.arange(b) if indices is None else np.asarray(indices)

    kn = np.stack([denoise_provider(x).flat() for x in images])
    if kn.shape[-1] != cfg.epsilon**2:
        raise ValueError(f"denoise kernels have {kn.shape[-1]} taps, expected {cfg.epsilon}x{cfg.epsilon}")
    edges = np.stack([edge_provider(x).maps for x in images]).astype(np.float32)
    w = np.stack([init_scale_weights(edges.shape[1], rng_for(cfg.seed, int(i))) for i in indices])
    ka = kn.copy()
    y = predict_labels(model, images) if labels is None else np.asarray(labels, dtype=np.int64)
    patches = neighborhoods(images, cfg.epsilon)

    xa, mask = _mixed_forward(patches, edges, w, ka, kn, cfg)
    label_now = predict_labels(model, xa)
    done = np.zeros(b, dtype=bool)
    success = np.zeros(b, dtype=bool)
    aborted = np.zeros(b, dtype=bool)
    used = np.zeros(b, dtype=int)
    traces: list[list[float]] = [[] for _ in range(b)]

    for t in range(1, cfg.iterations + 1):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        wt = dc.Tensor(w[act], requires_grad=True)
        kat = dc.Tensor(ka[act], requires_grad=True)
        with dc.Tape() as tape:
            m = mask_tensor(edges[act], wt, cfg.theta, cfg.gain)
            filtered = mixed_filter(patches[act], m, kat, kn[act])
            logits = model.forward(filtered)
            ce = dc.cross_entropy(logits, y[act], reduction="sum")
            obj = dc.sub(dc.scale(ce, cfg.lam), dc.scale(kernel_distance(kat, kn[act]), cfg.gamma))
        per_image = _per_image_objective(logits.numpy(), y[act], ka[act], kn[act], cfg)
        grads = dc.backward(tape, obj)
        gw, gk = grads[wt.id], grads[kat.id]
        finite = np.isfinite(per_image) & np.isfinite(gw).all(axis=1) & np.isfinite(gk).reshape(len(act), -1).all(axis=1)
        for j, i in enumerate(act):
            if finite[j]:
                traces[i].append(float(per_image[j]))
        bad = act[~finite]
        if bad.size:
            logger.warning("non-finite objective or gradient at iteration %d for %d image(s); aborting them", t, bad.size)
            aborted[bad] = done[bad] = True
            used[bad] = t
        good = act[finite]
        w[good] = w[good] + cfg.alpha * gw[finite]
        ka[good] = ka[good] + cfg.alpha * gk[finite]
        if good.size:
            new_xa, new_mask = _mixed_forward(patches[good], edges[good], w[good], ka[good], kn[good], cfg)
            xa[good], mask[good] = new_xa, new_mask
            label_now[good] = predict_labels(model, new_xa)
            used[good] = t
            hit = good[label_now[good] != y[good]]
            success[hit] = done[hit] = True

    results = []
    for i in range(b):
        results.append(AttackResult(
            adversarial=xa[i], success=bool(success[i]), iterations=int(used[i]), y=int(y[i]),
            final_label=int(label_now[i]), mask=mask[i], scale_weights=w[i].copy(),
            objective_trace=traces[i], config=cfg, aborted=bool(aborted[i])))
    return results


def _per_image_objective(logits, y, ka, kn, cfg: AttackConfig) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ce = np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]
    pixels = ka.shape[1] * ka.shape[2]
    j2 = ((ka.astype(np.float64) - kn) ** 2).reshape(len(y), -1).sum(axis=1) / pixels
    return cfg.lam * ce - cfg.gamma * j2


def pasadena_attack(noisy, model: Classifier, edge_provider: EdgeProvider | None = None,
                    denoise_provider: DenoiseProvider | None = None, cfg: AttackConfig = AttackConfig(),
                    clean=None, index: int = 0) -> AttackResult:
    """Attack one noisy image; attaches quality metrics vs the noisy input
    (and vs ``clean`` when given)."""
    res = pasadena_attack_batch([noisy], model, edge_provider, denoise_provider, cfg, indices=[index])[0]
    res.metrics["vs_noisy"] = quality_report(res.adversarial, noisy)
    if clean is not None:
        res.metrics["vs_clean"] = quality_report(res.adversarial, clean)
    return res


def fgsm_attack(img, model: Classifier, eps: float, y: int | None = None) -> np.ndarray:
    """One signed-gradient step of size ``eps`` (pixel units in [0, 1]) on the cross-entropy."""
    img = as_image(img)
    if eps == 0:
        return img.copy()
    if y is None:
        y = int(predict_labels(model, img[None])[0])
    _, g = loss_and_grad(model, img, y)
    return np.clip(img + eps * np.sign(g), 0, 1).astype(np.float32)


def fgsm_batch(images, model: Classifier, eps: float, labels) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if eps == 0:
        return images.copy()
    x = dc.Tensor(images, requires_grad=True)
    with dc.Tape() as tape:
        loss = dc.cross_entropy(model.forward(x), labels, reduction="sum")
    g = dc.backward(tape, loss)[x.id]
    return np.clip(images + eps * np.sign(g), 0, 1).astype(np.float32)
