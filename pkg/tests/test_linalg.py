import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eqface.errors import DimensionMismatch, ZeroVector
from eqface.linalg import add, axpy, dot, l2_normalize, matvec, scale

finite_floats = st.floats(min_value=-1e6, max_value=1e6,
                          allow_nan=False, allow_infinity=False)


def test_l2_normalize_345_triangle():
    np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)


def test_l2_normalize_unit_vector_unchanged():
    e1 = np.zeros(8)
    e1[0] = 1.0
    np.testing.assert_array_equal(l2_normalize(e1), e1)


def test_l2_normalize_ones():
    expected = 1.0 / math.sqrt(2.0)
    np.testing.assert_allclose(l2_normalize([1.0, 1.0]), [expected, expected],
                               atol=1e-12)


def test_l2_normalize_zero_vector_raises():
    with pytest.raises(ZeroVector):
        l2_normalize([0.0, 0.0, 0.0])
    with pytest.raises(ZeroVector):
        l2_normalize([1e-13, 0.0])


@given(st.lists(finite_floats, min_size=1, max_size=32))
def test_l2_normalize_idempotent(values):
    v = np.array(values)
    if np.linalg.norm(v) <= 1e-6:
        return
    once = l2_normalize(v)
    twice = l2_normalize(once)
    assert np.max(np.abs(twice - once)) < 1e-9


@given(st.lists(finite_floats, min_size=1, max_size=32))
def test_normalized_self_dot_is_one(values):
    v = np.array(values)
    if np.linalg.norm(v) <= 1e-6:
        return
    u = l2_normalize(v)
    assert abs(dot(u, u) - 1.0) < 1e-9


def test_dot_orthogonal_and_identical():
    assert dot([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert dot([1.0, 0.0], [1.0, 0.0]) == 1.0


def test_dot_mixed():
    assert dot([0.6, 0.8], [0.8, 0.6]) == pytest.approx(0.96, abs=1e-15)


def test_dot_left_to_right_order():
    # catastrophic cancellation exposes the accumulation order
    a = np.array([1e16, 1.0, -1e16])
    b = np.array([1.0, 1.0, 1.0])
    acc = 0.0
    for x, y in zip(a, b):
        acc += x * y
    assert dot(a, b) == acc


def test_dot_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        dot([1.0, 2.0], [1.0, 2.0, 3.0])


def test_matvec_identity_and_zero():
    v = np.array([2.5, -1.5])
    np.testing.assert_array_equal(matvec(np.eye(2), v), v)
    np.testing.assert_array_equal(matvec(np.zeros((2, 2)), v), [0.0, 0.0])


def test_matvec_small_case():
    np.testing.assert_array_equal(matvec([[1.0, 2.0], [3.0, 4.0]], [1.0, 1.0]),
                                  [3.0, 7.0])


def test_matvec_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        matvec(np.eye(3), [1.0, 2.0])


def test_elementwise_helpers():
    np.testing.assert_array_equal(add([1.0, 2.0], [3.0, 4.0]), [4.0, 6.0])
    np.testing.assert_array_equal(scale([1.0, -2.0], 3.0), [3.0, -6.0])
    np.testing.assert_array_equal(axpy(2.0, [1.0, 1.0], [0.5, 0.5]), [2.5, 2.5])
    with pytest.raises(DimensionMismatch):
        add([1.0], [1.0, 2.0])


def test_deterministic_repeat_calls():
    rng = np.random.default_rng(7)
    a = rng.standard_normal(33)
    b = rng.standard_normal(33)
    w = rng.standard_normal((9, 33))
    assert dot(a, b) == dot(a, b)
    np.testing.assert_array_equal(l2_normalize(a), l2_normalize(a))
    np.testing.assert_array_equal(matvec(w, a), matvec(w, a))


def test_rejects_non_finite():
    with pytest.raises(ValueError):
        l2_normalize([np.nan, 1.0])
    with pytest.raises(ValueError):
        dot([np.inf, 1.0], [1.0, 1.0])
