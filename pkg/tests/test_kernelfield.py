import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pasadena import diffcore as dc
from pasadena.kernelfield import (
    KernelField, apply_kernels, gaussian_field, identity_field, kernel_distance, kernel_l2, mix_apply,
)


def brute_force(img, kernels, clamp=True):
    """Triple loop over pixels, neighbours and channels with edge replication."""
    h, w, c = img.shape
    k = kernels.shape[-1]
    r = k // 2
    out = np.zeros((h, w, c))
    for y in range(h):
        for x in range(w):
            for i in range(k):
                for j in range(k):
                    qy = min(max(y + i - r, 0), h - 1)
                    qx = min(max(x + j - r, 0), w - 1)
                    out[y, x] += img[qy, qx].astype(np.float64) * kernels[y, x, i, j]
    return np.clip(out, 0, 1) if clamp else out


def random_field(rng, h, w, k=5):
    return KernelField(rng.normal(0.04, 0.05, size=(h, w, k, k)).astype(np.float32))


def test_gaussian_field_properties():
    f = gaussian_field(4, 4, 5, 1.0)
    k = f.weights[0, 0]
    assert abs(k.sum() - 1) < 1e-6
    assert k[2, 2] == k.max()
    assert f.normalized


def test_gaussian_field_flat_limit_and_degenerate():
    np.testing.assert_allclose(gaussian_field(2, 2, 5, 1e4).weights, 1 / 25, atol=1e-3)
    np.testing.assert_array_equal(gaussian_field(2, 2, 1, 1.0).weights, 1.0)


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        gaussian_field(4, 4, 4, 1.0)


def test_identity_field_is_identity():
    img = np.random.default_rng(0).random((9, 7, 3)).astype(np.float32)
    np.testing.assert_array_equal(apply_kernels(img, identity_field(9, 7)), img)


def test_normalized_field_preserves_constant():
    img = np.full((8, 8, 3), 0.3, dtype=np.float32)
    np.testing.assert_allclose(apply_kernels(img, gaussian_field(8, 8, 5, 0.8)), 0.3, atol=1e-6)


def test_apply_matches_brute_force():
    rng = np.random.default_rng(1)
    img = rng.random((8, 8, 3)).astype(np.float32)
    field = random_field(rng, 8, 8)
    np.testing.assert_allclose(apply_kernels(img, field), brute_force(img, field.weights), atol=1e-6)


def test_dimension_mismatch_rejected():
    img = np.zeros((8, 8, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        apply_kernels(img, gaussian_field(8, 9))
    with pytest.raises(ValueError):
        mix_apply(img, np.zeros((8, 8)), gaussian_field(8, 8, 5), gaussian_field(8, 8, 3))


def test_mix_extremes():
    rng = np.random.default_rng(2)
    img = rng.random((8, 8, 3)).astype(np.float32)
    ka, kn = random_field(rng, 8, 8), gaussian_field(8, 8)
    np.testing.assert_allclose(mix_apply(img, np.zeros((8, 8)), ka, kn), apply_kernels(img, kn), atol=1e-7)
    np.testing.assert_allclose(mix_apply(img, np.ones((8, 8)), ka, kn), apply_kernels(img, ka), atol=1e-7)


def test_mix_half_is_mean_before_clamp():
    rng = np.random.default_rng(3)
    img = rng.random((8, 8, 3)).astype(np.float32)
    ka, kn = random_field(rng, 8, 8), random_field(rng, 8, 8)
    half = mix_apply(img, np.full((8, 8), 0.5), ka, kn, clamp=False)
    mean = 0.5 * (brute_force(img, ka.weights, False) + brute_force(img, kn.weights, False))
    np.testing.assert_allclose(half, mean, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12), st.integers(1, 12))
def test_mask_irrelevant_when_kernels_coincide(seed, h, w):
    rng = np.random.default_rng(seed)
    img = rng.random((h, w, 3)).astype(np.float32)
    k = random_field(rng, h, w)
    mask = rng.random((h, w)).astype(np.float32)
    np.testing.assert_allclose(mix_apply(img, mask, k, k), apply_kernels(img, k), atol=1e-6)


def test_kernel_l2_values():
    kn = gaussian_field(4, 6, 5)
    assert kernel_l2(kn, kn) == 0
    ka = KernelField(kn.weights + 1)
    assert kernel_l2(ka, kn) == pytest.approx(25.0, abs=1e-5)


def test_kernel_l2_gradient():
    rng = np.random.default_rng(4)
    kn = rng.normal(size=(3, 4, 9))
    rep = dc.grad_check(lambda ka: kernel_distance(ka, kn), kn + rng.normal(size=kn.shape))
    assert rep.passed
    ka = kn + 0.3
    np.testing.assert_allclose(rep.numeric, rep.analytic, rtol=1e-3)
    t = dc.Tensor(ka, requires_grad=True)
    with dc.Tape() as tape:
        loss = kernel_distance(t, kn)
    np.testing.assert_allclose(dc.backward(tape, loss)[t.id], 2 * 0.3 / 12, rtol=1e-5)


def test_field_serialization_round_trip():
    f = random_field(np.random.default_rng(5), 3, 4, 3)
    data = f.to_bytes()
    assert data[:4] == (3).to_bytes(4, "little")
    g = KernelField.from_bytes(data)
    assert g.weights.tobytes() == f.weights.tobytes()
    with pytest.raises(ValueError):
        KernelField.from_bytes(data[:-1])
