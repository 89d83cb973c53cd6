import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from spmcmc.kernels import (
    InvalidScoreError,
    PreconditionedIMQ,
    SteinKernel,
    imq_div_grad,
    imq_eval,
    imq_grad_x,
    stein_kernel_eval,
)


def random_spd(rng, d):
    A = rng.standard_normal((d, d))
    return A @ A.T + 0.5 * d * np.eye(d)


# -- base kernel ---------------------------------------------------------------


def test_imq_at_zero_distance_is_one():
    k = PreconditionedIMQ(np.eye(3))
    x = np.array([0.3, -2.0, 7.0])
    assert imq_eval(k, x, x) == 1.0


def test_imq_unit_displacement():
    k = PreconditionedIMQ(np.eye(2))
    assert imq_eval(k, np.array([1.0, 0.0]), np.zeros(2)) == pytest.approx(2**-0.5, abs=1e-15)


def test_imq_scaled_preconditioner_halves_displacement():
    k = PreconditionedIMQ(4 * np.eye(2))
    assert imq_eval(k, np.array([2.0, 0.0]), np.zeros(2)) == pytest.approx(2**-0.5, abs=1e-15)


def test_scalar_and_vector_lambda_forms_agree():
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((2, 3))
    a = PreconditionedIMQ(2.5, dim=3)
    b = PreconditionedIMQ(np.full(3, 2.5))
    c = PreconditionedIMQ(2.5 * np.eye(3))
    assert a.eval(x, y) == pytest.approx(c.eval(x, y), rel=1e-14)
    assert b.eval(x, y) == pytest.approx(c.eval(x, y), rel=1e-14)


def test_lambda_inverse_is_consistent():
    rng = np.random.default_rng(0)
    L = random_spd(rng, 4)
    k = PreconditionedIMQ(L)
    np.testing.assert_allclose(k.lam_inv @ L, np.eye(4), atol=1e-10)


def test_rejects_bad_parameters():
    with pytest.raises(ValueError):
        PreconditionedIMQ(np.array([[1.0, 2.0], [2.0, 1.0]]))  # indefinite
    with pytest.raises(ValueError):
        PreconditionedIMQ(np.array([[1.0, 0.1], [0.0, 1.0]]))  # not symmetric
    with pytest.raises(ValueError):
        PreconditionedIMQ(np.eye(2), beta=-1.0)
    with pytest.raises(ValueError):
        PreconditionedIMQ(np.eye(2), beta=0.0)


def test_dimension_mismatch_is_an_error():
    k = PreconditionedIMQ(np.eye(2))
    with pytest.raises(ValueError):
        imq_eval(k, np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        imq_grad_x(k, np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        imq_div_grad(k, np.zeros(1), np.zeros(1))


def test_gradient_at_coincident_points_is_zero():
    k = PreconditionedIMQ(np.eye(2))
    np.testing.assert_array_equal(imq_grad_x(k, np.ones(2), np.ones(2)), np.zeros(2))


def test_gradient_one_dimensional_value():
    # frozen from central differences of the base kernel (step 1e-6)
    k = PreconditionedIMQ(1.0, dim=1)
    g = imq_grad_x(k, np.array([0.0]), np.array([1.0]))
    assert g[0] == pytest.approx(0.35355339059327373, abs=1e-12)
    fd = oracles.fd_grad(lambda a: oracles.imq(a, [1.0], 1.0), np.array([0.0]))
    assert g[0] == pytest.approx(fd[0], abs=1e-8)


def test_div_grad_values():
    for d in (1, 2, 5):
        k = PreconditionedIMQ(np.eye(d))
        assert imq_div_grad(k, np.zeros(d), np.zeros(d)) == pytest.approx(d, abs=1e-14)
    k = PreconditionedIMQ(1.0, dim=1)
    v = imq_div_grad(k, np.array([0.0]), np.array([1.0]))
    assert v == pytest.approx(-3 * 2**-2.5 + 2**-1.5, abs=1e-14)
    assert v == pytest.approx(-0.17677669529663687, abs=1e-12)


def test_gradient_antisymmetric_and_div_grad_symmetric():
    rng = np.random.default_rng(1)
    k = PreconditionedIMQ(random_spd(rng, 3), beta=-0.7)
    for _ in range(100):
        x, y = rng.standard_normal((2, 3)) * 2
        np.testing.assert_allclose(k.grad_x(x, y), -k.grad_x(y, x), atol=1e-15)
        assert k.div_grad(x, y) == pytest.approx(k.div_grad(y, x), rel=1e-13)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_derivatives_match_symbolic_oracle(d):
    rng = np.random.default_rng(10 + d)
    L = random_spd(rng, d)
    for beta in (-0.5, -0.2, -0.9):
        k = PreconditionedIMQ(L, beta)
        for _ in range(10):
            x, y = rng.standard_normal((2, d)) * 1.5
            assert k.eval(x, y) == pytest.approx(oracles.sym_imq(x, y, L, beta), rel=1e-12)
            np.testing.assert_allclose(k.grad_x(x, y), oracles.sym_grad_x(x, y, L, beta), rtol=1e-10, atol=1e-13)
            assert k.div_grad(x, y) == pytest.approx(oracles.sym_div_grad(x, y, L, beta), rel=1e-10, abs=1e-13)


def test_block_forms_match_pointwise():
    rng = np.random.default_rng(2)
    k = PreconditionedIMQ(random_spd(rng, 2))
    X, Y = rng.standard_normal((5, 2)), rng.standard_normal((4, 2))
    K = k.matrix(X, Y)
    G = k.grad_x_matrix(X, Y)
    for i in range(5):
        for j in range(4):
            assert K[i, j] == pytest.approx(k.eval(X[i], Y[j]), rel=1e-14)
            np.testing.assert_allclose(G[i, j], k.grad_x(X[i], Y[j]), rtol=1e-13, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(
    x=arrays(np.float64, 2, elements=st.floats(-5, 5)),
    y=arrays(np.float64, 2, elements=st.floats(-5, 5)),
    beta=st.floats(-0.95, -0.05),
)
def test_imq_range_property(x, y, beta):
    k = PreconditionedIMQ(np.array([[2.0, 0.3], [0.3, 0.5]]), beta)
    v = k.eval(x, y)
    assert 0.0 < v <= 1.0
    if np.any(x != y) and np.linalg.norm(x - y) > 1e-6:
        assert v < 1.0


# -- Stein kernel --------------------------------------------------------------


def test_stein_kernel_standard_normal_values():
    sk = SteinKernel(PreconditionedIMQ(np.eye(2)))
    assert stein_kernel_eval(sk, np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2)) == pytest.approx(2.0, abs=1e-14)
    sk1 = SteinKernel(PreconditionedIMQ(1.0, dim=1))
    x, y = np.array([0.0]), np.array([1.0])
    v = stein_kernel_eval(sk1, x, -x, y, -y)
    assert v == pytest.approx(-0.5303300858899107, abs=1e-12)
    assert v == pytest.approx(oracles.fd_stein_kernel(x, -x, y, -y, 1.0), abs=1e-6)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_stein_kernel_matches_symbolic_oracle(d):
    rng = np.random.default_rng(20 + d)
    L = random_spd(rng, d)
    sk = SteinKernel(PreconditionedIMQ(L, -0.5))
    for _ in range(10):
        x, sx, y, sy = rng.standard_normal((4, d))
        assert sk(x, sx, y, sy) == pytest.approx(oracles.sym_stein_kernel(x, sx, y, sy, L), rel=1e-10, abs=1e-12)


def test_stein_kernel_symmetric():
    rng = np.random.default_rng(4)
    sk = SteinKernel(PreconditionedIMQ(random_spd(rng, 3)))
    for _ in range(100):
        x, sx, y, sy = rng.standard_normal((4, 3)) * 2
        assert sk(x, sx, y, sy) == pytest.approx(sk(y, sy, x, sx), rel=1e-12, abs=1e-14)


def test_stein_kernel_rejects_non_finite_scores():
    sk = SteinKernel(PreconditionedIMQ(np.eye(2)))
    with pytest.raises(InvalidScoreError):
        sk(np.zeros(2), np.array([np.nan, 0.0]), np.ones(2), np.zeros(2))
    with pytest.raises(ValueError):
        sk(np.zeros(2), np.zeros(2), np.ones(3), np.zeros(3))


def test_stein_matrix_and_diag_match_pointwise():
    rng = np.random.default_rng(5)
    sk = SteinKernel(PreconditionedIMQ(random_spd(rng, 2), beta=-0.4))
    X, S = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    K = sk.matrix(X, S, X, S)
    for i in range(6):
        for j in range(6):
            assert K[i, j] == pytest.approx(sk(X[i], S[i], X[j], S[j]), rel=1e-13, abs=1e-15)
    np.testing.assert_allclose(sk.diag(X, S), np.diag(K), rtol=1e-13)


def test_stein_gram_is_positive_semidefinite():
    rng = np.random.default_rng(6)
    sk = SteinKernel(PreconditionedIMQ(np.eye(2)))
    X = rng.standard_normal((20, 2)) * 2
    K = sk.matrix(X, -X, X, -X)
    assert np.linalg.eigvalsh(K).min() >= -1e-8


def test_preconditioned_stein_kernel_as_change_of_coordinates():
    # Mapping z = Lambda^{-1/2} x turns the preconditioned Stein kernel into the Stein
    # kernel of the identity IMQ with matrix-valued weight Lambda^{-1}, evaluated on the
    # pushed-forward target (whose score is Lambda^{1/2} s).
    rng = np.random.default_rng(7)
    L = random_spd(rng, 2)
    w, V = np.linalg.eigh(L)
    root = V @ np.diag(np.sqrt(w)) @ V.T
    root_inv = np.linalg.inv(root)
    sk = SteinKernel(PreconditionedIMQ(L))
    for _ in range(20):
        x, sx, y, sy = rng.standard_normal((4, 2))
        lhs = sk(x, sx, y, sy)
        rhs = oracles.matrix_valued_stein_kernel(root_inv @ x, root @ sx, root_inv @ y, root @ sy, np.linalg.inv(L))
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)
