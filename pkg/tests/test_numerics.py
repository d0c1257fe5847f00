import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from asyncpfl.numerics import (DimensionError, NonFiniteError, SeededRng, as_param, axpy, check_finite,
                               fd_gradient, fd_jacobian_vector, rel_error, vector_hash)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_check_finite_rejects_nan_and_inf():
    with pytest.raises(NonFiniteError):
        check_finite(np.array([1.0, np.nan]))
    with pytest.raises(NonFiniteError):
        check_finite(np.array([np.inf]))


def test_as_param_copies_and_checks_length():
    src = [1, 2, 3]
    w = as_param(src, 3)
    assert w.dtype == np.float64 and w.tolist() == [1.0, 2.0, 3.0]
    with pytest.raises(DimensionError):
        as_param(src, 4)


def test_axpy_rejects_mismatch():
    with pytest.raises(DimensionError):
        axpy(1.0, np.ones(2), np.ones(3))


@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite), finite)
def test_axpy_matches_numpy(x, y, a):
    assert np.array_equal(axpy(a, x, y), a * x + y)


def test_fd_gradient_of_cubic():
    f = lambda w: float(np.sum(w ** 3) + w[0] * w[1])
    w = np.array([0.3, -1.2, 2.0])
    exact = 3 * w ** 2 + np.array([w[1], w[0], 0.0])
    assert rel_error(fd_gradient(f, w), exact) < 1e-8


def test_fd_gradient_rejects_bad_step():
    with pytest.raises(ValueError):
        fd_gradient(lambda w: 0.0, np.zeros(2), h=0.0)


def test_fd_jacobian_vector_is_hvp_for_quadratic():
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    v = np.array([1.0, -2.0])
    assert np.allclose(fd_jacobian_vector(lambda w: H @ w, np.ones(2), v), H @ v, atol=1e-10)


def test_rel_error_is_zero_on_equal_vectors():
    g = np.array([1.0, 2.0])
    assert rel_error(g, g) == 0.0


def test_vector_hash_distinguishes_one_ulp():
    w = np.array([1.0, 2.0])
    w2 = w.copy()
    w2[1] = np.nextafter(w2[1], 3.0)
    assert vector_hash(w) != vector_hash(w2)
    assert vector_hash(w) == vector_hash(w.copy())


def test_streams_are_reproducible_and_disjoint():
    r = SeededRng(5)
    a1 = r.stream(0, "batch").standard_normal(4)
    a2 = SeededRng(5).stream(0, "batch").standard_normal(4)
    b = r.stream(1, "batch").standard_normal(4)
    c = r.stream(0, "inner").standard_normal(4)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b) and not np.array_equal(a1, c)


def test_drawing_from_one_client_leaves_others_alone():
    r = SeededRng(9)
    s0 = r.client(0)
    s0.batch.standard_normal(1000)
    assert np.array_equal(r.client(1).batch.standard_normal(3), SeededRng(9).client(1).batch.standard_normal(3))


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(0, 1000))
def test_stream_determinism_property(seed, owner):
    x = SeededRng(seed).stream(owner, "delay").random(3)
    y = SeededRng(seed).stream(owner, "delay").random(3)
    assert np.array_equal(x, y)


def test_negative_owner_rejected():
    with pytest.raises(ValueError):
        SeededRng(0).stream(-1, "batch")
