import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from floodcnn.errors import ConfigError, InputError, ShapeError
from floodcnn.layers import softmax
from floodcnn.optim import SGD, cross_entropy, he_uniform, l2_penalty, make_rng, sgd_momentum_step

from conftest import central_difference


def test_cross_entropy_uniform():
    loss, grad = cross_entropy(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]))
    assert loss == pytest.approx(math.log(2), abs=1e-4)
    np.testing.assert_allclose(grad, [[-0.5, 0.5]])


def test_cross_entropy_perfect_is_clipped():
    loss, _ = cross_entropy(np.array([[1 - 1e-7, 1e-7]]), np.array([[1.0, 0.0]]))
    assert 0 < loss < 2e-7
    loss, _ = cross_entropy(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
    assert loss == pytest.approx(1e-7, rel=1e-3)


def test_cross_entropy_fused_gradient_finite_difference(rng):
    z = rng.standard_normal((5, 2))
    y = np.eye(2)[rng.integers(0, 2, 5)]
    _, grad = cross_entropy(softmax(z), y)
    numeric = central_difference(lambda: cross_entropy(softmax(z), y)[0], z)
    np.testing.assert_allclose(grad, numeric, atol=1e-5)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(InputError):
        cross_entropy(np.array([[0.5, 0.5]]), np.array([[1.0, 1.0]]))
    with pytest.raises(InputError):
        cross_entropy(np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]]))
    with pytest.raises(ShapeError):
        cross_entropy(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0, 0.0]]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=2), st.integers(0, 1))
def test_cross_entropy_non_negative(z, label):
    loss, _ = cross_entropy(softmax(np.array([z])), np.eye(2)[[label]])
    assert loss >= 0


def test_l2_penalty():
    pen, grads = l2_penalty([np.array([1.0, 2.0])], 0.001)
    assert pen == pytest.approx(0.005)
    np.testing.assert_allclose(grads[0], [0.002, 0.004])
    pen, grads = l2_penalty([np.array([1.0, 2.0])], 0.0)
    assert pen == 0 and np.all(grads[0] == 0)
    with pytest.raises(ConfigError):
        l2_penalty([np.ones(2)], -1)


def test_l2_gradient_matches_finite_difference(rng):
    w = rng.standard_normal((3, 4))
    _, (g,) = l2_penalty([w], 0.01)
    np.testing.assert_allclose(g, central_difference(lambda: l2_penalty([w], 0.01)[0], w), rtol=1e-6)


def test_sgd_momentum_two_steps():
    w, v = np.array([1.0]), np.array([0.0])
    sgd_momentum_step(w, np.array([0.5]), v, 0.1, 0.9)
    assert v[0] == pytest.approx(-0.05) and w[0] == pytest.approx(0.95)
    sgd_momentum_step(w, np.array([0.5]), v, 0.1, 0.9)
    assert v[0] == pytest.approx(-0.095) and w[0] == pytest.approx(0.855)


def test_sgd_without_momentum_is_gradient_descent(rng):
    w = rng.standard_normal(5)
    g = rng.standard_normal(5)
    expected = w - 0.01 * g
    sgd_momentum_step(w, g, np.zeros(5), 0.01, 0.0)
    np.testing.assert_allclose(w, expected)


def test_sgd_quadratic_contracts_by_one_minus_lr():
    w = np.array([3.0])
    sgd_momentum_step(w, w.copy(), np.zeros(1), 0.25, 0.0)
    assert w[0] == 3.0 * (1 - 0.25)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_momentum_step(np.ones(2), np.ones(3), np.zeros(2), 0.1, 0.9)


def test_sgd_optimizer_state():
    opt = SGD()
    assert opt.lr == 0.001 and opt.momentum == 0.9
    p = {"w": np.ones((2, 2))}
    opt.step(p, {"w": np.ones((2, 2))})
    assert opt.velocity["w"].shape == (2, 2)
    with pytest.raises(ConfigError):
        SGD(lr=0)
    with pytest.raises(ConfigError):
        SGD(momentum=1.0)


def test_he_uniform_bounds():
    w = he_uniform((50, 100), 50, make_rng(0))
    assert np.all(np.abs(w) <= math.sqrt(6 / 50)) and w.dtype == np.float32
    w = he_uniform((1000,), 6, make_rng(1), np.float64)
    assert np.all(np.abs(w) <= 1.0) and np.abs(w).max() > 0.99
    with pytest.raises(ConfigError):
        he_uniform((2,), 0, make_rng(0))


def test_he_uniform_moments():
    bound = math.sqrt(6 / 27)
    w = he_uniform((100_000,), 27, make_rng(5), np.float64)
    assert abs(w.mean()) < 0.01
    assert w.var() == pytest.approx(bound**2 / 3, rel=0.1)


def test_rng_reproducible():
    a = he_uniform((3, 3), 9, make_rng(42))
    b = he_uniform((3, 3), 9, make_rng(42))
    assert np.array_equal(a, b)
