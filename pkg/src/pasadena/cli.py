"""Command-line entry point: ``pasadena <command> ...``.

Exit codes: 0 on success (an attack that fails to flip the label still
exits 0), 1 on internal errors, 2 on usage or I/O errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .attack import AttackConfig, GaussianDenoiser, fgsm_attack, pasadena_attack
from .benchmark import DEFAULT_LAMBDAS, run_benchmark, rows_to_csv
from .classifier import (
    DEFAULT_WIDTHS, TRANSFER_WIDTHS, Classifier, TrainingDiverged, WeightFileError, generate_toy_dataset,
    load_weights, predict, save_weights, train,
)
from .imaging import DEFAULT_PHOTON_SCALE, NOISE_KINDS, ImageFormatError, NoiseSpec, add_noise, read_image, write_image
from .kernelfield import apply_kernels
from .metrics import quality_report
from .perceptual import multi_scale_edges

logger = logging.getLogger("pasadena")

# test images for the accuracy report are drawn from a seed offset away from training
TEST_SEED_OFFSET = 500
DEFAULT_STRENGTH = {"gaussian": 0.1, "speckle": 0.2, "impulse": 0.05, "shot": DEFAULT_PHOTON_SCALE}


class UsageError(Exception):
    """Bad flags or unusable input/output paths (exit code 2)."""


def _parse_range(text: str) -> tuple[float, ...]:
    """``start:stop:count`` (inclusive linspace) or a comma list."""
    try:
        if ":" in text:
            start, stop, count = text.split(":")
            return tuple(float(v) for v in np.round(np.linspace(float(start), float(stop), int(count)), 6))
        return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"cannot parse range {text!r}: {exc}") from None


def _check_writable(path: Path) -> None:
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir() or not os.access(parent, os.W_OK) or path.is_dir():
        raise UsageError(f"cannot write {path}")


def _write_bytes(path: Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


def _read_weights(path) -> Classifier:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read weights {path}: {exc.strerror}") from None
    return load_weights(data)


def _read_image(path) -> np.ndarray:
    try:
        return read_image(path)
    except OSError as exc:
        raise UsageError(f"cannot read image {path}: {exc.strerror}") from None


def _write_image(path, img) -> None:
    try:
        write_image(path, img)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def cmd_train(args) -> int:
    out = Path(args.out)
    _check_writable(out)
    if args.epochs == 0:
        logger.warning("--epochs 0: the classifier is untrained and will score near chance")
    widths = TRANSFER_WIDTHS if args.transfer else DEFAULT_WIDTHS
    model = Classifier(widths).init(args.seed)
    train_set = generate_toy_dataset(args.seed, args.per_class)
    test_set = generate_toy_dataset(args.seed + TEST_SEED_OFFSET, max(1, args.per_class // 4))
    report = train(model, train_set, epochs=args.epochs, lr=args.lr, seed=args.seed, test_set=test_set)
    _write_bytes(out, save_weights(model))
    print(f"epochs {report.epochs}  loss {report.final_loss:.4f}  "
          f"train accuracy {report.train_accuracy:.4f}  clean test accuracy {report.test_accuracy:.4f}")
    return 0


def cmd_noise(args) -> int:
    img = _read_image(args.input)
    strength = args.sigma if args.sigma is not None else args.strength
    if strength is None:
        strength = DEFAULT_STRENGTH[args.kind]
    _write_image(args.output, add_noise(img, NoiseSpec(args.kind, strength, args.seed)))
    return 0


def cmd_denoise(args) -> int:
    img = _read_image(args.input)
    _write_image(args.output, apply_kernels(img, GaussianDenoiser(args.ksize, args.sigma)(img)))
    return 0


def cmd_metrics(args) -> int:
    x, ref = _read_image(args.image), _read_image(args.reference)
    if x.shape != ref.shape:
        raise UsageError(f"image shapes differ: {x.shape} vs {ref.shape}")
    sys.stdout.write(_dump_json(quality_report(x, ref).as_dict()))
    return 0


def cmd_edges(args) -> int:
    stack = multi_scale_edges(_read_image(args.input), levels=args.levels, dilation=args.dilation)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for scale, m in zip(stack.scales, stack.maps):
        _write_image(out / f"edges_s{scale:g}.pgm", m[..., None])
    return 0


def cmd_attack(args) -> int:
    cfg = AttackConfig(epsilon=args.epsilon, lam=args.lam, theta=args.theta, alpha=args.alpha,
                       iterations=args.iters, gain=args.gain, seed=args.seed)
    model = _read_weights(args.weights)
    noisy = _read_image(args.input)
    clean = _read_image(args.clean) if args.clean else None
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc.strerror}") from None
    res = pasadena_attack(noisy, model, cfg=cfg, clean=clean)
    _write_image(out / "adv.ppm", res.adversarial)
    _write_image(out / "mask.pgm", res.mask[..., None])
    _write_bytes(out / "result.json", _dump_json(res.to_json()).encode())
    status = "label changed" if res.success else "label unchanged"
    print(f"{status}: {res.y} -> {res.final_label} after {res.iterations} iteration(s)")
    return 0


def cmd_fgsm(args) -> int:
    model = _read_weights(args.weights)
    img = _read_image(args.input)
    before = predict(model, img).label
    adv = fgsm_attack(img, model, args.eps / 255)
    _write_image(args.output, adv)
    after = predict(model, adv).label
    print(f"{'label changed' if after != before else 'label unchanged'}: {before} -> {after}")
    return 0


def cmd_benchmark(args) -> int:
    model = _read_weights(args.weights)
    transfer = _read_weights(args.transfer_weights) if args.transfer_weights else None
    if args.csv:
        _check_writable(Path(args.csv))
    base = AttackConfig(epsilon=args.epsilon, alpha=args.alpha, iterations=args.iters, gain=args.gain, seed=args.seed)
    rows = run_benchmark(model, transfer, args.thetas, args.lambdas, n=args.n, seed=args.seed, base=base)
    text = rows_to_csv(rows)
    if args.csv:
        _write_bytes(Path(args.csv), text.encode())
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pasadena", description="Adversarial denoise attacks on a toy classifier.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-classifier", help="train the toy classifier and write a weight file")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--per-class", type=int, default=200, help="training images per class")
    t.add_argument("--transfer", action="store_true", help="use the narrower transfer architecture")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    n = sub.add_parser("noise", help="add synthetic noise to an image")
    n.add_argument("--kind", choices=NOISE_KINDS, default="gaussian")
    n.add_argument("--sigma", type=float, help="std for gaussian/speckle")
    n.add_argument("--strength", type=float, help="generic strength: rate for impulse, photon scale for shot")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("input")
    n.add_argument("output")
    n.set_defaults(func=cmd_noise)

    d = sub.add_parser("denoise", help="filter with the normalized Gaussian kernel field")
    d.add_argument("--ksize", type=int, default=5)
    d.add_argument("--sigma", type=float, default=1.0)
    d.add_argument("input")
    d.add_argument("output")
    d.set_defaults(func=cmd_denoise)

    m = sub.add_parser("metrics", help="print quality scores of IMAGE against REFERENCE as JSON")
    m.add_argument("image")
    m.add_argument("reference")
    m.set_defaults(func=cmd_metrics)

    e = sub.add_parser("edges", help="export the multi-scale edge maps as PGM files")
    e.add_argument("--levels", type=int, default=3)
    e.add_argument("--dilation", type=int, default=3)
    e.add_argument("input")
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_edges)

    a = sub.add_parser("attack", help="run the adversarial denoise attack on one image")
    a.add_argument("--weights", required=True)
    a.add_argument("--theta", type=float, default=0.45)
    a.add_argument("--lambda", dest="lam", type=float, default=0.9)
    a.add_argument("--alpha", type=float, default=0.1)
    a.add_argument("--iters", type=int, default=10)
    a.add_argument("--epsilon", type=int, default=5, help="kernel size")
    a.add_argument("--gain", type=float, default=100.0)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--clean", help="clean reference, adds vs_clean metrics")
    a.add_argument("input")
    a.add_argument("--out-dir", required=True)
    a.set_defaults(func=cmd_attack)

    f = sub.add_parser("fgsm", help="one signed-gradient step against the model's own label")
    f.add_argument("--weights", required=True)
    f.add_argument("--eps", type=float, default=8.0, help="step in 8-bit levels")
    f.add_argument("input")
    f.add_argument("output")
    f.set_defaults(func=cmd_fgsm)

    b = sub.add_parser("benchmark", help="sweep theta and lambda; write one CSV row per cell plus FGSM")
    b.add_argument("--weights", required=True)
    b.add_argument("--transfer-weights")
    b.add_argument("--thetas", type=_parse_range, default=_parse_range("0.05:0.65:7"))
    b.add_argument("--lambdas", type=_parse_range, default=DEFAULT_LAMBDAS)
    b.add_argument("--n", type=int, default=100)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--alpha", type=float, default=0.1)
    b.add_argument("--iters", type=int, default=10)
    b.add_argument("--epsilon", type=int, default=5)
    b.add_argument("--gain", type=float, default=100.0)
    b.add_argument("--csv")
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except (UsageError, ImageFormatError, WeightFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # configuration invariants (e.g. lambda range) are usage errors
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
