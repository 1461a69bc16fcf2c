import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import elementwise_inner
from subspace_descent.matrix import (
    NonFiniteError,
    ShapeError,
    axpy,
    elementwise_div_shifted,
    elementwise_sqrt,
    frobenius_inner,
    frobenius_norm,
    hadamard,
    hadamard_square,
    identity,
    matmul,
    scale,
    sign,
    transpose,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def mats(shape):
    return arrays(np.float64, shape, elements=finite)


def test_inner_identity():
    assert frobenius_inner(identity(2), identity(2)) == 2.0


def test_inner_with_zero():
    A = np.random.default_rng(0).standard_normal((3, 4))
    assert frobenius_inner(A, np.zeros((3, 4))) == 0.0


def test_inner_matches_elementwise_sum():
    rng = np.random.default_rng(1)
    A, B = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    assert frobenius_inner(A, B) == pytest.approx(elementwise_inner(A, B), rel=1e-14)


def test_inner_shape_mismatch():
    with pytest.raises(ShapeError):
        frobenius_inner(np.ones((2, 3)), np.ones((3, 2)))


@pytest.mark.parametrize("A, expected", [(identity(3), np.sqrt(3)), (np.zeros((2, 2)), 0.0),
                                         (np.array([[3.0, 4.0]]), 5.0)])
def test_norm_examples(A, expected):
    assert frobenius_norm(A) == pytest.approx(expected, abs=1e-15)


def test_elementwise_examples():
    np.testing.assert_array_equal(hadamard([[1, 2]], [[3, 4]]), [[3, 8]])
    np.testing.assert_array_equal(hadamard_square([[-2, 3]]), [[4, 9]])
    assert elementwise_div_shifted([[1.0]], [[0.0]], 1e-8)[0, 0] == pytest.approx(1e8)


def test_shifted_divide_needs_positive_e():
    with pytest.raises(ValueError):
        elementwise_div_shifted([[1.0]], [[1.0]], 0.0)


def test_sqrt_rejects_negative():
    with pytest.raises(ValueError):
        elementwise_sqrt([[1.0, -1e-3]])


def test_no_broadcasting():
    with pytest.raises(ShapeError):
        hadamard(np.ones((2, 2)), np.ones((1, 2)))
    with pytest.raises(ShapeError):
        axpy(1.0, np.ones((2, 2)), np.ones((2,)))
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        hadamard([[np.inf]], [[1.0]])
    with pytest.raises(NonFiniteError):
        scale(1e300, np.array([[1e300]]))


def test_matmul_sign_transpose():
    A = np.random.default_rng(2).standard_normal((2, 5))
    np.testing.assert_array_equal(matmul(identity(2), A), A)
    np.testing.assert_array_equal(sign([[-0.5, 0.0, 2.0]]), [[-1.0, 0.0, 1.0]])
    rng = np.random.default_rng(3)
    A, B = rng.standard_normal((3, 2)), rng.standard_normal((2, 4))
    np.testing.assert_allclose(transpose(matmul(A, B)), matmul(transpose(B), transpose(A)), atol=1e-15)


def test_axpy_scale():
    x, y = np.array([[1.0, 2.0]]), np.array([[3.0, 5.0]])
    np.testing.assert_array_equal(axpy(2.0, x, y), [[5.0, 9.0]])
    np.testing.assert_array_equal(scale(-1.0, x), -x)


@settings(max_examples=50, deadline=None)
@given(mats((3, 4)), mats((3, 4)))
def test_inner_symmetric_and_norm(A, B):
    assert frobenius_inner(A, B) == frobenius_inner(B, A)
    assert frobenius_norm(A) ** 2 == pytest.approx(frobenius_inner(A, A), rel=1e-12, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(mats((4, 3)))
def test_identity_and_involution(A):
    np.testing.assert_array_equal(matmul(identity(4), A), A)
    np.testing.assert_array_equal(matmul(A, identity(3)), A)
    np.testing.assert_array_equal(transpose(transpose(A)), A)


def test_left_adjoint_identity():
    rng = np.random.default_rng(4)
    for _ in range(100):
        P, X, Y = rng.standard_normal((6, 3)), rng.standard_normal((3, 5)), rng.standard_normal((6, 5))
        lhs = frobenius_inner(matmul(P, X), Y)
        rhs = frobenius_inner(X, matmul(transpose(P), Y))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))
