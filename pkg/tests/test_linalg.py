import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nqde.autodiff import Tape, Tensor, backward
from nqde import autodiff as ad
from nqde.checks import polar_oracle, random_skew, taylor_expm_oracle, well_conditioned
from nqde.linalg import (
    ProjectionError,
    expm,
    expm_vjp,
    orthogonal_from_generator,
    orthogonality_error,
    polar_project,
    skew,
)

from conftest import numgrad, rel_err


def test_expm_zero_is_identity():
    np.testing.assert_array_equal(expm(np.zeros((4, 4))), np.eye(4))


def test_expm_rotation_by_pi():
    R = expm([[0.0, math.pi], [-math.pi, 0.0]])
    np.testing.assert_allclose(R, -np.eye(2), atol=1e-14)


def test_expm_scalar():
    assert expm([[1.0]])[0, 0] == pytest.approx(math.e, rel=1e-15)
    assert expm([[-30.0]])[0, 0] == pytest.approx(math.exp(-30.0), rel=1e-12)


def test_expm_rejects_non_square():
    with pytest.raises(ValueError):
        expm(np.zeros((2, 3)))


def test_expm_matches_long_taylor(rng):
    for _ in range(5):
        A = rng.uniform(-1, 1, (8, 8))
        assert np.linalg.norm(expm(A) - taylor_expm_oracle(A)) <= 1e-10


def test_expm_large_norm_uses_squaring(rng):
    A = random_skew(rng, 6) * 10
    Q = expm(A)
    assert orthogonality_error(Q) <= 1e-11
    np.testing.assert_allclose(Q @ expm(-A), np.eye(6), atol=1e-11)


def test_expm_vjp_at_zero_is_identity(rng):
    G = rng.standard_normal((5, 5))
    np.testing.assert_allclose(expm_vjp(np.zeros((5, 5)), G), G, atol=1e-15)


def test_expm_vjp_scalar():
    np.testing.assert_allclose(expm_vjp([[0.7]], [[2.0]]), [[2.0 * math.exp(0.7)]], rtol=1e-14)


def test_expm_vjp_order_mismatch():
    with pytest.raises(ValueError):
        expm_vjp(np.zeros((3, 3)), np.zeros((2, 2)))


def test_expm_vjp_directional(rng):
    A, G = rng.uniform(-1, 1, (6, 6)), rng.standard_normal((6, 6))
    eps = 1e-6
    for _ in range(5):
        E = rng.standard_normal((6, 6))
        fd = (expm(A + eps * E) - expm(A - eps * E)) / (2 * eps)
        lhs, rhs = np.sum(expm_vjp(A, G) * E), np.sum(G * fd)
        assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), abs(rhs))


def test_skew_examples():
    S = np.array([[1.0, 2.0], [2.0, 5.0]])
    np.testing.assert_array_equal(skew(S), np.zeros((2, 2)))
    np.testing.assert_array_equal(skew([[0.0, 1.0], [0.0, 0.0]]), [[0.0, 1.0], [-1.0, 0.0]])


def test_expm_of_skew_orthogonal(rng):
    for _ in range(100):
        A = rng.uniform(-1, 1, (32, 32))
        assert orthogonality_error(expm(skew(A))) <= 1e-12


def test_expm_of_skew_determinant_one(rng):
    for n in range(1, 9):
        Q = expm(random_skew(rng, n))
        assert np.linalg.det(Q) == pytest.approx(1.0, abs=1e-9)


def test_orthogonality_error_examples():
    assert orthogonality_error(np.eye(5)) == 0.0
    assert orthogonality_error(2 * np.eye(4)) == pytest.approx(3 * math.sqrt(4), rel=1e-15)


def test_polar_fixed_point(rng):
    Q = np.linalg.qr(rng.standard_normal((10, 10)))[0]
    np.testing.assert_array_equal(polar_project(Q), Q)


def test_polar_positive_diagonal():
    np.testing.assert_allclose(polar_project(np.diag([2.0, 0.5])), np.eye(2), atol=1e-13)


def test_polar_matches_eig_oracle(rng):
    for _ in range(20):
        M = well_conditioned(rng, 32)
        U = polar_project(M)
        assert np.linalg.norm(U - polar_oracle(M)) <= 1e-9
        assert orthogonality_error(U) <= 1e-12


def test_polar_idempotent(rng):
    U = polar_project(well_conditioned(rng, 16))
    assert np.linalg.norm(polar_project(U) - U) <= 1e-12


def test_polar_keeps_determinant_sign(rng):
    M = well_conditioned(rng, 7)
    M[0] *= -1 if np.linalg.det(M) > 0 else 1
    assert np.linalg.det(polar_project(M)) == pytest.approx(-1.0, abs=1e-10)


def test_polar_singular_raises_with_residual():
    M = np.diag([1.0, 1.0, 0.0])
    with pytest.raises(ProjectionError) as info:
        polar_project(M)
    assert info.value.residual > 0.5


def test_polar_zero_and_nonfinite_raise():
    with pytest.raises(ProjectionError):
        polar_project(np.zeros((3, 3)))
    with pytest.raises(ProjectionError):
        polar_project(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_orthogonal_from_generator_gradcheck(rng):
    A = Tensor(rng.uniform(-1, 1, (5, 5)) * 0.3, requires_grad=True)
    w = rng.standard_normal((5, 5))

    def build():
        return ad.sum_all(ad.square(ad.add(orthogonal_from_generator(A), Tensor(w))))

    with Tape() as tape:
        backward(build(), tape)
    fd = numgrad(lambda: float(build().data), A.data)
    assert rel_err(A.grad, fd) <= 1e-6
    assert orthogonality_error(orthogonal_from_generator(A).data) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(-3, 3)))
def test_expm_skew_orthogonal_property(a):
    Q = expm(skew(a))
    assert orthogonality_error(Q) <= 1e-11
    assert np.linalg.det(Q) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 12))
def test_polar_orthogonal_and_idempotent_property(seed, n):
    M = well_conditioned(np.random.default_rng(seed), n)
    U = polar_project(M)
    assert orthogonality_error(U) <= 1e-12
    assert np.linalg.norm(polar_project(U) - U) <= 1e-12
    assert np.linalg.norm(U - polar_oracle(M)) <= 1e-9
