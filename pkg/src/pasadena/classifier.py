"""Attack target: a small CNN trained on a procedural 10-class toy dataset.

The network is ``[conv3x3 -> relu -> maxpool2] * len(widths) -> dense``, built
on :mod:`pasadena.diffcore` so that input gradients are available for
attacks. Images are ``(H, W, C)`` float32 arrays in [0, 1].
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .imaging import rng_for

logger = logging.getLogger(__name__)

NUM_CLASSES = 10
IMAGE_SIZE = 32
DEFAULT_WIDTHS = (16, 32)
TRANSFER_WIDTHS = (12, 24)
WEIGHT_MAGIC = b"PSDN"
WEIGHT_VERSION = 1
LABEL_SMOOTHING = 0.1


class WeightFileError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# model


@dataclass
class Classifier:
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    in_channels: int = 3
    image_size: int = IMAGE_SIZE
    classes: int = NUM_CLASSES
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.image_size % (2 ** len(self.widths)):
            raise ValueError("image size must be divisible by 2 per pooling stage")

    @property
    def architecture(self) -> list[str]:
        layers = []
        c = self.in_channels
        for w in self.widths:
            layers += [f"conv {c}->{w} 3x3", "relu", "maxpool2"]
            c = w
        layers.append(f"dense {self.flat_features}->{self.classes}")
        return layers

    @property
    def flat_features(self) -> int:
        side = self.image_size // 2 ** len(self.widths)
        return self.widths[-1] * side * side

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        c = self.in_channels
        for i, w in enumerate(self.widths, 1):
            shapes[f"conv{i}.weight"] = (w, c, 3, 3)
            shapes[f"conv{i}.bias"] = (w,)
            c = w
        shapes["dense.weight"] = (self.flat_features, self.classes)
        shapes["dense.bias"] = (self.classes,)
        return shapes

    def init(self, seed: int) -> "Classifier":
        """He-normal weights, zero biases."""
        rng = rng_for(seed, 0)
        self.params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith("bias"):
                self.params[name] = np.zeros(shape, dtype=np.float32)
            else:
                fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
                self.params[name] = (rng.standard_normal(shape) * np.sqrt(2 / fan_in)).astype(np.float32)
        return self

    def forward(self, images, params: dict[str, dc.Tensor] | None = None) -> dc.Tensor:
        """Logits ``(N, classes)`` for a batch ``(N, H, W, C)`` tensor or array."""
        p = params if params is not None else self.params
        x = dc.as_tensor(images)
        if x.data.ndim == 3:
            x = dc.reshape(x, (1,) + x.shape)
        if x.shape[1:] != (self.image_size, self.image_size, self.in_channels):
            raise dc.ShapeError(
                f"model expects ({self.image_size}, {self.image_size}, {self.in_channels}) images, got {x.shape[1:]}")
        x = dc.transpose(x, (0, 3, 1, 2))
        for i in range(1, len(self.widths) + 1):
            b = p[f"conv{i}.bias"]
            b = dc.reshape(b, (1, -1, 1, 1))
            x = dc.maxpool2(dc.relu(dc.add(dc.conv2d(x, p[f"conv{i}.weight"]), b)))
        x = dc.reshape(x, (x.shape[0], -1))
        return dc.add(dc.matmul(x, p["dense.weight"]), p["dense.bias"])


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    label: int
    confidence: float


def predict(model: Classifier, img) -> Prediction:
    logits = model.forward(np.asarray(img, dtype=np.float32)).numpy()[0]
    probs = dc.softmax(logits).numpy()
    label = int(np.argmax(logits))
    return Prediction(logits, probs, label, float(probs[label]))


def predict_labels(model: Classifier, images, batch: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    out = [np.argmax(model.forward(images[i:i + batch]).numpy(), axis=1) for i in range(0, len(images), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def loss_and_grad(model: Classifier, img, y: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of the prediction on ``img`` against ``y`` and its input gradient."""
    if not 0 <= int(y) < model.classes:
        raise ValueError(f"label {y} out of range for {model.classes} classes")
    x = dc.Tensor(np.asarray(img, dtype=np.float32), requires_grad=True)
    with dc.Tape() as tape:
        loss = dc.cross_entropy(model.forward(x), [int(y)])
    grads = dc.backward(tape, loss)
    return loss.item(), grads[x.id]


# ---------------------------------------------------------------------------
# toy dataset


@dataclass(frozen=True)
class ToyDataset:
    images: np.ndarray  # (n, 32, 32, 3) float32
    labels: np.ndarray  # (n,) int64
    seed: int

    def __len__(self) -> int:
        return len(self.labels)


CLASS_NAMES = (
    "hstripes", "vstripes", "diagonal", "antidiagonal", "checker",
    "disk", "ring", "square", "cross", "triangle",
)


def _soft(d: np.ndarray, width: float = 0.06) -> np.ndarray:
    """Smooth step from a signed distance (positive = inside)."""
    return 0.5 * (1 + np.tanh(d / width))


def render_pattern(label: int, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Draw one jittered sample of class ``label`` as a ``(size, size, 3)`` image."""
    t = (np.arange(size) + 0.5) / size * 2 - 1
    v, u = np.meshgrid(t, t, indexing="ij")
    cx, cy = rng.uniform(-0.15, 0.15, 2)
    uu, vv = u - cx, v - cy
    phase = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(1.6, 2.2)  # cycles across the image
    tilt = rng.uniform(-0.12, 0.12)

    def stripes(angle):
        a = angle + tilt
        s = np.cos(a) * u + np.sin(a) * v
        return _soft(np.sin(np.pi * freq * s + phase), 0.35)

    if label == 0:
        p = stripes(np.pi / 2)
    elif label == 1:
        p = stripes(0.0)
    elif label == 2:
        p = stripes(np.pi / 4)
    elif label == 3:
        p = stripes(-np.pi / 4)
    elif label == 4:
        f = np.pi * freq * 0.9
        p = _soft(np.sin(f * u + phase) * np.sin(f * v + phase), 0.25)
    elif label == 5:
        r = rng.uniform(0.4, 0.6)
        p = _soft(r - np.hypot(uu, vv))
    elif label == 6:
        r = rng.uniform(0.45, 0.65)
        p = _soft(0.13 - np.abs(np.hypot(uu, vv) - r))
    elif label == 7:
        r = rng.uniform(0.35, 0.55)
        p = _soft(r - np.maximum(np.abs(uu), np.abs(vv)))
    elif label == 8:
        arm, half = rng.uniform(0.55, 0.75), rng.uniform(0.12, 0.2)
        bar_h = np.minimum(arm - np.abs(uu), half - np.abs(vv))
        bar_v = np.minimum(arm - np.abs(vv), half - np.abs(uu))
        p = _soft(np.maximum(bar_h, bar_v))
    elif label == 9:
        r = rng.uniform(0.5, 0.7)
        # upward-pointing triangle: intersection of three half-planes
        n = np.array([[0.0, 1.0], [np.sqrt(3) / 2, -0.5], [-np.sqrt(3) / 2, -0.5]])
        d = np.min([r / 2 - (nx * uu - ny * vv) for nx, ny in n], axis=0)
        p = _soft(d)
    else:
        raise ValueError(f"label must be in [0, {NUM_CLASSES}), got {label}")

    # colours are drawn independently of the class, so only structure identifies it
    while True:
        fg, bg = rng.uniform(0.05, 0.95, (2, 3))
        if abs((fg - bg) @ np.array([0.299, 0.587, 0.114])) >= 0.35:
            break
    img = bg + p[..., None] * (fg - bg)
    return np.clip(img, 0, 1).astype(np.float32)


def generate_toy_dataset(seed: int, n_per_class: int) -> ToyDataset:
    """Balanced, deterministic dataset; sample i uses its own RNG stream."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    n = n_per_class * NUM_CLASSES
    labels = np.arange(n, dtype=np.int64) % NUM_CLASSES
    images = np.stack([render_pattern(int(labels[i]), rng_for(seed, i)) for i in range(n)])
    return ToyDataset(images, labels, seed)


def export_dataset(ds: ToyDataset, directory) -> None:
    """Write ``NNNNN.ppm`` files plus ``labels.csv`` (filename,label)."""
    from pathlib import Path

    from .imaging import save_ppm

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["filename,label"]
    for i, (img, y) in enumerate(zip(ds.images, ds.labels)):
        name = f"{i:05d}.ppm"
        (out / name).write_bytes(save_ppm(img))
        rows.append(f"{name},{int(y)}")
    (out / "labels.csv").write_text("\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainReport:
    epochs: int
    final_loss: float
    train_accuracy: float
    test_accuracy: float


def accuracy(model: Classifier, ds: ToyDataset) -> float:
    return float(np.mean(predict_labels(model, ds.images) == ds.labels)) if len(ds) else 0.0


def train(model: Classifier, train_set: ToyDataset, epochs: int = 10, lr: float = 0.01, seed: int = 0,
          test_set: ToyDataset | None = None, batch_size: int = 32, momentum: float = 0.9,
          label_smoothing: float = LABEL_SMOOTHING) -> TrainReport:
    """Minibatch SGD with momentum on mean cross-entropy, in place.

    Targets are label-smoothed by default; without smoothing the toy task is
    learned to near-zero loss and the resulting saturated softmax leaves
    almost no input gradient to attack.
    """
    if not model.params:
        model.init(seed)
    rng = rng_for(seed, 1)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    loss_value = float("nan")
    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            params = {k: dc.Tensor(v, requires_grad=True) for k, v in model.params.items()}
            with dc.Tape() as tape:
                loss = dc.cross_entropy(model.forward(train_set.images[idx], params), train_set.labels[idx],
                                        smoothing=label_smoothing)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingDiverged(f"loss became {loss_value} in epoch {epoch + 1} at batch {start // batch_size}")
            grads = dc.backward(tape, loss)
            for k, t in params.items():
                velocity[k] = momentum * velocity[k] - lr * grads[t.id]
                model.params[k] = (model.params[k] + velocity[k]).astype(np.float32)
            total += loss_value * len(idx)
            count += len(idx)
        logger.info("epoch %d/%d: loss %.4f", epoch + 1, epochs, total / max(count, 1))
        loss_value = total / max(count, 1)
    test_acc = accuracy(model, test_set) if test_set is not None else float("nan")
    return TrainReport(epochs, loss_value, accuracy(model, train_set), test_acc)


# ---------------------------------------------------------------------------
# weight files


def save_weights(model: Classifier) -> bytes:
    """Serialize parameters: magic, version, count, then named little-endian f32 tensors."""
    if not model.params:
        raise ValueError("model has no parameters to save")
    parts = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(model.params))]
    for name in model.param_shapes():
        arr = np.asarray(model.params[name], dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_weights(data: bytes, model: Classifier | None = None) -> Classifier:
    """Parse a weight file; the architecture is inferred from tensor shapes
    unless ``model`` is given, in which case shapes must match it exactly."""
    if data[:4] != WEIGHT_MAGIC:
        raise WeightFileError("not a classifier weight file")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise WeightFileError("unexpected end of weight payload")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode()
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(data):
        raise WeightFileError(f"{len(data) - pos} trailing bytes after weight payload")

    if model is None:
        convs = sorted(k for k in params if k.startswith("conv") and k.endswith(".weight"))
        try:
            widths = tuple(params[f"conv{i}.weight"].shape[0] for i in range(1, len(convs) + 1))
            in_channels = params["conv1.weight"].shape[1]
            classes = params["dense.weight"].shape[1]
            flat = params["dense.weight"].shape[0]
        except KeyError as e:
            raise WeightFileError(f"weight file lacks tensor {e.args[0]}") from None
        side = int(round(np.sqrt(flat / widths[-1])))
        model = Classifier(widths, in_channels, side * 2 ** len(widths), classes)
    expected = model.param_shapes()
    if set(expected) != set(params):
        raise WeightFileError(f"tensor names {sorted(params)} do not match architecture {sorted(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise WeightFileError(f"shape mismatch for {name}: file has {params[name].shape}, architecture needs {shape}")
    model.params = params
    return model
