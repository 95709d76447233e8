import json
import re
import subprocess
import sys

import numpy as np
import pytest

from pasadena.benchmark import CSV_HEADER
from pasadena.classifier import generate_toy_dataset, predict_labels, save_weights
from pasadena.cli import main
from pasadena.imaging import NoiseSpec, add_noise, read_image, write_image


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, model_a):
    """Weights plus a clean/noisy pair that the model labels correctly."""
    d = tmp_path_factory.mktemp("cli")
    (d / "a.psdn").write_bytes(save_weights(model_a))
    ds = generate_toy_dataset(321, 1)
    for i, x in enumerate(ds.images):
        noisy = add_noise(x, NoiseSpec("gaussian", 0.1, 4))
        if predict_labels(model_a, noisy[None])[0] == ds.labels[i]:
            write_image(d / "clean.ppm", x)
            break
    return d


def run(*argv):
    return main([str(a) for a in argv])


def test_noise_is_seeded_and_identity_at_zero(workdir):
    src = workdir / "clean.ppm"
    assert run("noise", "--sigma", 0.1, "--seed", 4, src, workdir / "n1.ppm") == 0
    assert run("noise", "--sigma", 0.1, "--seed", 4, src, workdir / "n2.ppm") == 0
    assert (workdir / "n1.ppm").read_bytes() == (workdir / "n2.ppm").read_bytes()
    assert run("noise", "--sigma", 0, src, workdir / "n0.ppm") == 0
    assert (workdir / "n0.ppm").read_bytes() == src.read_bytes()
    assert run("noise", "--kind", "impulse", "--strength", 0.05, src, workdir / "imp.ppm") == 0


def test_noise_bad_kind_is_usage_error(workdir):
    with pytest.raises(SystemExit) as exc:
        run("noise", "--kind", "pink", workdir / "clean.ppm", workdir / "x.ppm")
    assert exc.value.code == 2


def test_missing_input_is_io_error(workdir, capsys):
    assert run("denoise", workdir / "absent.ppm", workdir / "x.ppm") == 2
    assert "cannot read" in capsys.readouterr().err


def test_malformed_image_is_io_error(workdir):
    (workdir / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    assert run("denoise", workdir / "bad.ppm", workdir / "x.ppm") == 2


def test_denoise_then_metrics(workdir, capsys):
    assert run("denoise", workdir / "clean.ppm", workdir / "blur.ppm") == 0
    capsys.readouterr()
    assert run("metrics", workdir / "blur.ppm", workdir / "clean.ppm") == 0
    rep = json.loads(capsys.readouterr().out)
    assert np.isfinite(rep["psnr_local"]) and rep["ssim"] < 1
    assert run("metrics", workdir / "clean.ppm", workdir / "clean.ppm") == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["psnr"] == 100 and rep["ssim"] == pytest.approx(1.0)


def test_attack_fixture_succeeds(workdir, capsys):
    run("noise", "--sigma", 0.1, "--seed", 4, workdir / "clean.ppm", workdir / "noisy.ppm")
    out = workdir / "att"
    assert run("attack", "--weights", workdir / "a.psdn", "--clean", workdir / "clean.ppm",
               workdir / "noisy.ppm", "--out-dir", out) == 0
    res = json.loads((out / "result.json").read_text())
    assert res["success"] is True and 1 <= res["iterations"] <= 10
    assert res["config"]["lambda"] == 0.9 and res["config"]["theta"] == 0.45
    assert read_image(out / "adv.ppm").shape == (32, 32, 3)
    assert read_image(out / "mask.pgm").shape == (32, 32, 1)
    first = (out / "result.json").read_bytes()
    assert run("attack", "--weights", workdir / "a.psdn", "--clean", workdir / "clean.ppm",
               workdir / "noisy.ppm", "--out-dir", out) == 0
    assert (out / "result.json").read_bytes() == first


def test_attack_zero_step_is_denoise(workdir):
    run("noise", "--sigma", 0.1, "--seed", 4, workdir / "clean.ppm", workdir / "noisy.ppm")
    run("denoise", workdir / "noisy.ppm", workdir / "den.ppm")
    out = workdir / "zero"
    assert run("attack", "--weights", workdir / "a.psdn", "--iters", 1, "--alpha", 0,
               workdir / "noisy.ppm", "--out-dir", out) == 0
    assert (out / "adv.ppm").read_bytes() == (workdir / "den.ppm").read_bytes()
    assert json.loads((out / "result.json").read_text())["success"] is False


def test_attack_lambda_out_of_range(workdir, capsys):
    assert run("attack", "--weights", workdir / "a.psdn", "--lambda", 1.1, workdir / "clean.ppm",
               "--out-dir", workdir / "bad") == 2
    assert "lambda must be in (0,1]" in capsys.readouterr().err


def test_attack_missing_weights(workdir):
    assert run("attack", "--weights", workdir / "none.psdn", workdir / "clean.ppm", "--out-dir", workdir / "x") == 2
    (workdir / "junk.psdn").write_bytes(b"junk")
    assert run("attack", "--weights", workdir / "junk.psdn", workdir / "clean.ppm", "--out-dir", workdir / "x") == 2


def test_denoise_then_fgsm_chain(workdir):
    run("noise", "--sigma", 0.1, "--seed", 4, workdir / "clean.ppm", workdir / "noisy.ppm")
    run("denoise", workdir / "noisy.ppm", workdir / "den.ppm")
    assert run("fgsm", "--weights", workdir / "a.psdn", "--eps", 8, workdir / "den.ppm", workdir / "dfgsm.ppm") == 0
    diff = np.abs(read_image(workdir / "dfgsm.ppm") - read_image(workdir / "den.ppm"))
    assert diff.max() <= 8 / 255 + 1e-6 and diff.max() > 0


def test_edges_export(workdir):
    assert run("edges", workdir / "clean.ppm", "--out-dir", workdir / "edges") == 0
    maps = sorted(p.name for p in (workdir / "edges").iterdir())
    assert maps == ["edges_s1.pgm", "edges_s2.pgm", "edges_s4.pgm"]
    assert set(np.unique(read_image(workdir / "edges" / "edges_s1.pgm"))) <= {0.0, 1.0}


def test_small_benchmark_is_byte_stable(workdir):
    args = ["benchmark", "--weights", workdir / "a.psdn", "--transfer-weights", workdir / "a.psdn",
            "--thetas", "0.05:0.65:2", "--lambdas", "0.9", "--n", 4, "--seed", 2]
    assert run(*args, "--csv", workdir / "b1.csv") == 0
    assert run(*args, "--csv", workdir / "b2.csv") == 0
    text = (workdir / "b1.csv").read_text()
    assert text == (workdir / "b2.csv").read_text()
    lines = text.splitlines()
    assert lines[0] == CSV_HEADER
    assert [ln.split(",")[0] for ln in lines[1:]] == ["0.0500", "0.6500", "fgsm"]
    assert all(ln.split(",")[8] == "4" for ln in lines[1:])


def test_benchmark_missing_weights(workdir):
    assert run("benchmark", "--weights", workdir / "none.psdn", "--n", 2) == 2


def test_train_unwritable_out(tmp_path, capsys):
    assert run("train-classifier", "--out", tmp_path / "missing" / "w.psdn") == 2
    assert "cannot write" in capsys.readouterr().err


def test_train_zero_epochs_warns(tmp_path, capsys):
    assert run("train-classifier", "--epochs", 0, "--per-class", 4, "--out", tmp_path / "w.psdn") == 0
    err = capsys.readouterr().err
    assert "WARNING" in err and "chance" in err
    assert (tmp_path / "w.psdn").read_bytes()[:4] == b"PSDN"


def test_train_default_flags(tmp_path, capsys):
    assert run("train-classifier", "--out", tmp_path / "w.psdn") == 0
    acc = float(re.search(r"clean test accuracy ([0-9.]+)", capsys.readouterr().out).group(1))
    assert acc >= 0.9


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "pasadena", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("train-classifier", "noise", "denoise", "attack", "metrics", "benchmark", "fgsm", "edges"):
        assert cmd in proc.stdout
