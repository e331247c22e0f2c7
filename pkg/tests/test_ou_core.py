import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import ou_scalar_mean_var
from hjbs.ou_core import (GaussianMeasure, PsdFactor, QuadratureRule, RangeViolationError, StateVector,
                          apply_transition, cameron_martin_density, ou_covariance, psd_sqrt_pseudoinverse,
                          semigroup_apply)


def test_state_vector_rejects_bad_input():
    with pytest.raises(ValueError):
        StateVector(np.array([np.nan]))
    with pytest.raises(ValueError):
        StateVector(np.zeros(2), space="X")
    with pytest.raises(ValueError):
        StateVector(np.zeros(2), "H", np.array([-1.0]), np.array([[1.0]]))


def test_semigroup_identity_and_dimension(scalar):
    assert semigroup_apply(scalar, 0.0, np.array([2.0]))[0] == 2.0
    with pytest.raises(ValueError):
        semigroup_apply(scalar, 0.1, np.zeros(3))
    with pytest.raises(ValueError):
        semigroup_apply(scalar, -0.1, np.zeros(1))


@given(st.floats(0.01, 2.0), st.floats(0.01, 2.0), st.floats(-3, 3))
def test_semigroup_law(scalar, t, s, x):
    lhs = semigroup_apply(scalar, t + s, np.array([x]))
    rhs = semigroup_apply(scalar, t, semigroup_apply(scalar, s, np.array([x])))
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-14)


@given(st.floats(0.01, 3.0))
def test_scalar_covariance_closed_form(scalar, t):
    _, var = ou_scalar_mean_var(0.0, t)
    assert ou_covariance(scalar, t)[0, 0] == pytest.approx(var, rel=1e-12)


def test_heat_covariance_quadrature_matches_closed_form(heat):
    rule = QuadratureRule.gauss_legendre(0.0, 0.3, 200)
    closed = ou_covariance(heat, 0.3)
    quad = ou_covariance(heat, 0.3, rule)
    assert np.allclose(closed, quad, rtol=1e-8, atol=1e-14)
    assert np.all(np.linalg.eigvalsh(closed) >= 0)


def test_covariance_needs_positive_time(scalar):
    with pytest.raises(ValueError):
        ou_covariance(scalar, 0.0)


@given(arrays(float, (4, 3), elements=st.floats(-2, 2)))
def test_psd_factor_routes_agree(F):
    M = F @ F.T
    a = PsdFactor.from_matrix(M, 1e-10)
    b = PsdFactor.from_factor(F, 1e-10)
    assert a.rank == b.rank
    if a.rank:
        assert np.allclose(a.projector(), b.projector(), atol=1e-6)


def test_pseudoinverse_square_root():
    M = np.diag([4.0, 1.0, 0.0])
    R = psd_sqrt_pseudoinverse(M)
    assert np.allclose(R, np.diag([0.5, 1.0, 0.0]))
    with pytest.raises(ValueError):
        psd_sqrt_pseudoinverse(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        psd_sqrt_pseudoinverse(np.diag([1.0, -1.0]))


def test_cameron_martin_density_integrates_to_one_and_matches_ratio():
    Sigma = np.array([[2.0, 0.5], [0.5, 1.0]])
    y = np.array([0.3, -0.2])
    z = GaussianMeasure(np.zeros(2), Sigma).sample(200000, 1, "cm")
    dens = cameron_martin_density(Sigma, y, z)
    assert dens.mean() == pytest.approx(1.0, abs=4 * dens.std() / np.sqrt(len(dens)))
    # closed-form ratio of two Gaussian densities
    P = np.linalg.inv(Sigma)
    pt = np.array([0.7, 0.1])
    ratio = np.exp(-0.5 * (pt - y) @ P @ (pt - y) + 0.5 * pt @ P @ pt)
    assert cameron_martin_density(Sigma, y, pt[None, :])[0] == pytest.approx(ratio, rel=1e-12)


def test_cameron_martin_range_violation():
    with pytest.raises(RangeViolationError):
        cameron_martin_density(np.diag([1.0, 0.0]), np.array([0.0, 1.0]), np.zeros((1, 2)))


def test_apply_transition_exact_at_zero_and_gaussian_identity(scalar):
    phi = lambda X: np.cos(X[:, 0])
    assert apply_transition(scalar, phi, 0.0, np.array([0.4]), 10, 0) == np.cos(0.4)
    est, se = apply_transition(scalar, phi, 0.7, np.array([0.4]), 100000, 3, return_stderr=True)
    m, v = ou_scalar_mean_var(0.4, 0.7)
    assert abs(est - np.cos(m) * np.exp(-v / 2)) <= 3 * se


def test_seed_determinism(scalar):
    phi = lambda X: X[:, 0] ** 2
    a = apply_transition(scalar, phi, 0.5, np.array([1.0]), 1000, 42)
    b = apply_transition(scalar, phi, 0.5, np.array([1.0]), 1000, 42)
    c = apply_transition(scalar, phi, 0.5, np.array([1.0]), 1000, 43)
    assert a == b and a != c


@given(st.floats(0.01, 5.0), st.integers(1, 12))
def test_graded_rule_integrates_inverse_square_root_exactly(b, n):
    rule = QuadratureRule.graded(0.0, b, n)
    assert rule.total == pytest.approx(b, rel=1e-12)
    assert np.all((rule.nodes > 0) & (rule.nodes < b))
    # the end cells are exact for s^{-1/2} on their own
    k = max(1, (n + 1) // 2)
    w0, x0 = rule.weights[0], rule.nodes[0]
    assert w0 * x0 ** -0.5 == pytest.approx(2 * w0**0.5, rel=1e-12)
    assert len(rule.nodes) == 2 * k
