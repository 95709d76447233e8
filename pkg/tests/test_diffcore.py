import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pasadena import diffcore as dc


def grad_of(fn, x):
    t = dc.Tensor(x, requires_grad=True)
    with dc.Tape() as tape:
        out = fn(t)
    return dc.backward(tape, out)[t.id]


def test_sigmoid_relu_values():
    assert dc.sigmoid(np.float32(0)).item() == 0.5
    assert dc.relu(np.float32(-3)).item() == 0
    assert dc.relu(np.float32(3)).item() == 3


def test_conv2d_center_of_constant_window():
    x = np.ones((1, 1, 3, 3), dtype=np.float32)
    w = np.ones((1, 1, 3, 3), dtype=np.float32)
    out = dc.conv2d(x, w).numpy()
    assert out[0, 0, 1, 1] == 9.0
    # zero "same" padding: corners see a 2x2 window
    assert out[0, 0, 0, 0] == 4.0


def test_square_gradient():
    g = grad_of(lambda x: dc.sum(dc.mul(x, x)), np.array([3.0]))
    np.testing.assert_allclose(g, [6.0])


def test_sigmoid_gradient_at_zero():
    g = grad_of(lambda x: dc.sum(dc.sigmoid(x)), np.zeros(4))
    np.testing.assert_allclose(g, 0.25)


def test_loss_gradient_is_one():
    x = dc.Tensor([2.0], requires_grad=True)
    with dc.Tape() as tape:
        loss = dc.sum(x)
    assert dc.backward(tape, loss)[loss.id] == 1


def test_nonscalar_loss_rejected():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    with dc.Tape() as tape:
        y = dc.mul(x, x)
    with pytest.raises(dc.ShapeError):
        dc.backward(tape, y)


@pytest.mark.parametrize("op,shapes", [
    (dc.add, [(2, 3), (4, 3)]),
    (dc.matmul, [(2, 3), (2, 3)]),
    (dc.conv2d, [(1, 2, 4, 4), (3, 1, 3, 3)]),
])
def test_shape_errors(op, shapes):
    with pytest.raises(dc.ShapeError):
        op(*[np.zeros(s) for s in shapes])


def test_maxpool_odd_rejected():
    with pytest.raises(dc.ShapeError):
        dc.maxpool2(np.zeros((1, 1, 3, 4)))


def test_clamp01_straight_through_inside():
    g = grad_of(lambda x: dc.sum(dc.clamp01(x)), np.array([-0.5, 0.2, 0.9, 1.5]))
    np.testing.assert_array_equal(g, [0, 1, 1, 0])
    np.testing.assert_array_equal(dc.clamp01(np.array([-0.5, 0.2, 1.5])).numpy(), np.float32([0, 0.2, 1]))


def test_tape_is_topologically_ordered():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    with dc.Tape() as tape:
        y = dc.relu(dc.mul(x, x))
        dc.sum(dc.sigmoid(y))
    seen = {x.id}
    for rec in tape.records:
        assert all(inp.id in seen or not inp.requires_grad for inp in rec.inputs)
        seen.add(rec.output.id)


def test_random_chain_matches_finite_differences():
    rng = np.random.default_rng(0)
    c = rng.normal(size=5)

    def fn(x):
        return dc.sum(dc.mul(dc.relu(dc.mul(x, c)), x))

    for _ in range(10):
        # keep away from the relu kink
        x = rng.normal(size=5)
        x[np.abs(x) < 0.05] += 0.1
        rep = dc.grad_check(fn, x, h=1e-3, tol=1e-3)
        assert rep.passed, rep.max_rel_error


def test_grad_check_sum_of_squares():
    rep = dc.grad_check(lambda x: dc.l2_norm(x), np.random.default_rng(1).normal(size=10))
    assert rep.passed and not rep.kinks.any()


def test_grad_check_constant_function():
    rep = dc.grad_check(lambda x: dc.sum(dc.scale(x, 0.0)), np.ones(4))
    assert rep.passed
    np.testing.assert_array_equal(rep.analytic, 0)
    np.testing.assert_array_equal(rep.numeric, 0)


def test_grad_check_flags_relu_kink():
    rep = dc.grad_check(lambda x: dc.sum(dc.relu(x)), np.array([0.0, 0.7, -0.4]))
    assert rep.kinks.tolist() == [True, False, False]
    assert rep.passed


def test_grad_check_does_not_flag_curvature_at_zero_gradient():
    rep = dc.grad_check(lambda x: dc.l2_norm(x), np.array([0.0, 1.0]))
    assert not rep.kinks.any()


OPS = {
    "add": lambda x: dc.l2_norm(dc.add(x, np.arange(6.0).reshape(2, 3))),
    "sub_broadcast": lambda x: dc.l2_norm(dc.sub(x, np.array([1.0, -2.0, 0.5]))),
    "mul_broadcast": lambda x: dc.sum(dc.mul(dc.mul(x, x), np.array([[1.0], [3.0]]))),
    "scale": lambda x: dc.l2_norm(dc.scale(x, -1.7)),
    "sum_axis": lambda x: dc.l2_norm(dc.sum(x, axis=0)),
    "sigmoid": lambda x: dc.l2_norm(dc.sigmoid(x)),
    "softmax": lambda x: dc.sum(dc.mul(dc.softmax(x), np.arange(6.0).reshape(2, 3))),
    "cross_entropy": lambda x: dc.cross_entropy(x, [2, 0]),
    "matmul": lambda x: dc.l2_norm(dc.matmul(x, np.linspace(-1, 1, 12).reshape(3, 4))),
    "transpose_reshape": lambda x: dc.sum(dc.mul(dc.reshape(dc.transpose(x, (1, 0)), (6,)), np.arange(6.0))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        rep = dc.grad_check(OPS[name], rng.normal(size=(2, 3)))
        assert rep.passed, (name, rep.max_rel_error)


def test_conv_and_pool_gradients():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(2, 2, 3, 3))
    coeff = rng.normal(size=(1, 2, 2, 2))

    def fn(x):
        return dc.sum(dc.mul(dc.maxpool2(dc.conv2d(x, w)), coeff))

    rep = dc.grad_check(fn, rng.normal(size=(1, 2, 4, 4)))
    assert rep.passed, rep.max_rel_error

    x = rng.normal(size=(1, 2, 4, 4))
    rep = dc.grad_check(lambda k: dc.l2_norm(dc.conv2d(x, k)), w)
    assert rep.passed, rep.max_rel_error


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_backward_is_linear(a, b, seed):
    x0 = np.random.default_rng(seed).normal(size=4)

    def f(x):
        return dc.sum(dc.sigmoid(x))

    def g(x):
        return dc.l2_norm(x)

    combo = grad_of(lambda x: dc.add(dc.scale(f(x), a), dc.scale(g(x), b)), x0)
    np.testing.assert_allclose(combo, a * grad_of(f, x0) + b * grad_of(g, x0), atol=1e-5)


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    x = dc.Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
    w = dc.Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
    with dc.Tape() as tape:
        loss = dc.cross_entropy(dc.reshape(dc.maxpool2(dc.relu(dc.conv2d(x, w))), (2, -1)), [1, 5])
    first = dc.backward(tape, loss)
    second = dc.backward(tape, loss)
    for k in (x.id, w.id):
        assert first[k].tobytes() == second[k].tobytes()


def test_forward_values_finite_and_float32():
    out = dc.softmax(np.array([[1000.0, -1000.0, 0.0]]))
    assert out.data.dtype == np.float32
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data.sum(), 1, atol=1e-6)
    assert np.isfinite(dc.sigmoid(np.array([-1e4, 1e4])).data).all()


def test_inputs_are_not_frozen():
    a = np.ones(3, dtype=np.float32)
    dc.Tensor(a)
    a[0] = 2  # the tensor took a private copy
