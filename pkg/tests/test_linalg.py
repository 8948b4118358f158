import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ropevq.linalg import matmul, mse, softmax_row

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_matmul_identity(rng):
    M = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(matmul(np.eye(3), M), M)


def test_matmul_hand_case():
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])


def test_matmul_matches_triple_loop(rng):
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(a, b), ref, rtol=1e-12, atol=1e-12)


def test_matmul_rejects_mismatch():
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, (3, 2), elements=finite),
       st.floats(-10, 10))
def test_matmul_scalar_associativity(a, b, c):
    lhs = matmul(c * a, b)
    rhs = c * matmul(a, b)
    scale = np.abs(c) * (np.abs(a) @ np.abs(b)) + 1e-300
    assert np.all(np.abs(lhs - rhs) <= 1e-12 * scale)


def test_softmax_uniform():
    np.testing.assert_allclose(softmax_row([0, 0, 0]), [1 / 3] * 3, rtol=1e-15)


def test_softmax_large_input_is_stable():
    out = softmax_row([1000.0, 0.0])
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0)
    assert out[1] < 1e-300 or out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_matches_high_precision():
    mpmath.mp.dps = 50
    v = [1, 2, 3]
    e = [mpmath.e ** x for x in v]
    ref = [float(x / sum(e)) for x in e]
    np.testing.assert_allclose(softmax_row(v), ref, rtol=1e-15)


def test_softmax_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        softmax_row([])
    with pytest.raises(ValueError):
        softmax_row([0.0, np.nan])


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)))
def test_softmax_is_probability_vector(v):
    p = softmax_row(v)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12


def test_mse_cases(rng):
    M = rng.standard_normal((3, 3))
    assert mse(M, M) == 0.0
    assert mse([0, 0], [1, 1]) == 1.0
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    total = 0.0
    for i in range(4):
        for j in range(5):
            total += (a[i, j] - b[i, j]) ** 2
    assert mse(a, b) == pytest.approx(total / 20, rel=1e-14)


def test_mse_shape_mismatch():
    with pytest.raises(ValueError):
        mse(np.ones(3), np.ones(4))


@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
def test_mse_symmetric_nonnegative(a, b):
    assert mse(a, b) == mse(b, a) >= 0
    if np.all(a == b):
        assert mse(a, b) == 0
    if mse(a, b) == 0:
        # squares of differences below ~1e-162 underflow to zero
        assert np.all(np.abs(a - b) < 1e-150)
