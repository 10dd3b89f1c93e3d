import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from floodcnn import tensor
from floodcnn.errors import ShapeError

from conftest import naive_matmul


def test_create_fill():
    assert tensor.create([2, 2], 0.0).tolist() == [[0, 0], [0, 0]]
    assert tensor.create([1], 3.5).tolist() == [3.5]
    t = tensor.create([2, 3], 1.0)
    assert t.shape == (2, 3) and np.all(t == 1.0)


@pytest.mark.parametrize("shape", [[0], [2, -1], []])
def test_create_rejects_bad_extent(shape):
    with pytest.raises(ShapeError):
        tensor.create(shape, 0.0)


def test_default_dtype_and_verification_mode():
    assert tensor.create([1]).dtype == np.float32
    with tensor.verification_mode():
        assert tensor.create([1]).dtype == np.float64
    assert tensor.get_dtype() == np.float32


def test_matmul_examples(rng):
    m = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(tensor.matmul(np.eye(2), m), m)
    assert tensor.matmul(np.array([[1.0, 2]]), np.array([[3.0], [4]])).tolist() == [[11.0]]
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(tensor.matmul(a, b), naive_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_mismatch():
    with pytest.raises(ShapeError):
        tensor.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        tensor.matmul(np.ones(3), np.ones((3, 1)))


def test_map_zip():
    assert tensor.map_zip("add", np.array([1.0, 2]), np.array([3.0, 4])).tolist() == [4, 6]
    assert tensor.map_zip("scale", np.array([2.0, 4]), 0.5).tolist() == [1, 2]
    x = np.arange(6.0).reshape(2, 3)
    assert np.all(tensor.map_zip("mul", x, np.zeros_like(x)) == 0)
    with pytest.raises(ShapeError):
        tensor.map_zip("add", np.ones((2, 3)), np.ones(3))


def test_reduce(rng):
    assert tensor.reduce("mean", np.array([1.0, 2, 3]), 0) == 2.0
    assert tensor.reduce("max", np.array([[1.0, 5], [3, 2]]), 1).tolist() == [5, 3]
    a = rng.standard_normal((3, 4))
    seq = 0.0
    for v in a.ravel():
        seq += v
    assert tensor.reduce("sum", a, (0, 1)) == pytest.approx(seq, rel=1e-5)
    with pytest.raises(ShapeError):
        tensor.reduce("sum", a, 2)


def test_index_offset_round_trip():
    shape = (2, 3, 4)
    offsets = [tensor.offset_of(idx, shape) for idx in itertools.product(*map(range, shape))]
    assert offsets == list(range(24))
    for off in range(24):
        assert tensor.offset_of(tensor.index_of(off, shape), shape) == off
    assert tensor.strides_for([2, 3, 4]) == (12, 4, 1)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e3, 1e3)))
def test_identity_matmul_property(a):
    assert np.array_equal(tensor.matmul(a, np.eye(a.shape[1])), a)
    assert np.array_equal(tensor.matmul(np.eye(a.shape[0]), a), a)


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_add_commutes_bitwise(data):
    shape = data.draw(st.tuples(st.integers(1, 5), st.integers(1, 5)))
    a = data.draw(arrays(np.float64, shape, elements=st.floats(-1e6, 1e6)))
    b = data.draw(arrays(np.float64, shape, elements=st.floats(-1e6, 1e6)))
    assert np.array_equal(tensor.map_zip("add", a, b), tensor.map_zip("add", b, a))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(-100, 100)))
def test_full_sum_matches_sequential(a):
    seq = 0.0
    for v in a.ravel():
        seq += v
    assert tensor.reduce("sum", a) == pytest.approx(seq, rel=1e-5, abs=1e-9)
