import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from hjbs.models import (DelayConfig, HeatConfig, TrajectoryGrid, build_delay_model, build_heat_model,
                         delay_semigroup_adjoint_apply, delay_semigroup_apply, etAB_first, model_from_dict,
                         projected_semigroup, scalar_model, upsilon_adjoint_apply, upsilon_apply, upsilon_rows)
from hjbs.ou_core import StateVector


@pytest.mark.parametrize("n", [1, 2, 3, 7, 20])
def test_heat_control_columns_match_quadrature(n, heat):
    e = lambda x: np.sqrt(2 / np.pi) * np.sin(n * x)
    right = quad(lambda x: (x / np.pi) * e(x), 0, np.pi)[0] * n**2
    left = quad(lambda x: (1 - x / np.pi) * e(x), 0, np.pi)[0] * n**2
    assert heat.C[n - 1, 0] == pytest.approx(left, rel=1e-10)
    assert heat.C[n - 1, 1] == pytest.approx(right, rel=1e-10)


def test_heat_spectrum_and_noise():
    h = build_heat_model(HeatConfig(n_modes=5, beta=2.0))
    assert np.allclose(np.diag(h.A), -np.arange(1, 6) ** 2)
    assert np.allclose(np.diag(h.G @ h.G.T), np.arange(1, 6) ** -4.0)


def test_heat_rejects_projection_outside_domain():
    v = tuple([0.0] * 19 + [1.0])
    with pytest.raises(ValueError):
        build_heat_model(HeatConfig(p_vectors=(v,)))
    with pytest.raises(ValueError):
        build_heat_model(HeatConfig(eps=0.3))
    with pytest.raises(ValueError):
        build_heat_model(HeatConfig(p_vectors=((1.0, 0.0), (2.0, 0.0))))


def test_eigen_projection_commutes(heat):
    assert heat.commutes_with_projection()
    mixed = build_heat_model(HeatConfig(p_vectors=((1.0, 0.5),)))
    assert not mixed.commutes_with_projection()


def _rand_state(model, rng):
    return rng.normal(size=model.dim)


@given(st.floats(0.0, 2.0), st.integers(0, 10**6))
def test_delay_adjoint_is_exact_transpose(delay, t, seed):
    rng = np.random.default_rng(seed)
    x, z = _rand_state(delay, rng), _rand_state(delay, rng)
    lhs = delay.inner(delay_semigroup_apply(delay, t, x), z)
    rhs = delay.inner(x, delay_semigroup_adjoint_apply(delay, t, z))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


@given(st.integers(1, 40), st.integers(1, 40))
def test_delay_semigroup_law_on_grid_times(delay, i, j):
    x = np.random.default_rng(i * 100 + j).normal(size=delay.dim)
    t, s = i * delay.h, j * delay.h
    lhs = delay_semigroup_apply(delay, t + s, x)
    rhs = delay_semigroup_apply(delay, t, delay_semigroup_apply(delay, s, x))
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_delay_pending_input_enters_first_component(delay):
    x = np.full(delay.dim, 0.3)
    x[0] = 1.0
    for t in (0.1, 0.5, 1.0, 1.7):
        y = projected_semigroup(delay, t, x)[0]
        assert y == pytest.approx(1.0 + 0.3 * min(t, 1.0), abs=1e-12)


def test_etab_first_switches_on_after_the_lag(delay):
    assert etAB_first(delay, 0.5, 1.0)[0] == pytest.approx(1.0)
    assert etAB_first(delay, 1.0, 1.0)[0] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        delay.etAB_first(0.0)


def test_delay_atom_validation():
    with pytest.raises(ValueError):
        build_delay_model(DelayConfig(atoms=((-0.5, 1.0),)))
    with pytest.raises(ValueError):
        build_delay_model(DelayConfig(eps_delay=1.5))
    m = build_delay_model(DelayConfig(atoms=((-0.987, 1.0),), eps_delay=0.9, m_lag=10))
    assert m.snap_error == pytest.approx(abs(-1.0 - -0.987))


def test_semigroup_bar_moves_and_absorbs_atoms(delay):
    x = StateVector(np.zeros(delay.dim), "H_bar", np.array([-0.3]), np.array([[2.0]]))
    before = delay.semigroup_bar(0.2, x)
    assert before.has_atoms and before.atom_lags[0] == pytest.approx(-0.1)
    after = delay.semigroup_bar(0.5, x)
    assert not after.has_atoms and after.coords[0] == pytest.approx(2.0)


def test_control_increment_mass(delay):
    inc = delay.control_increment(0.05, np.array([[1.5]]))[0]
    x0, x1 = inc[0], inc[1:]
    assert x0 == pytest.approx(0.075)
    assert x1.sum() * delay.h == pytest.approx(0.075)


def test_history_state_constant_control(delay):
    x = delay.history_state(0.2, lambda th: np.array([1.0]))
    assert x[0] == 0.2 and np.allclose(x[1:], 1.0)


def test_upsilon_adjoint_identity(delay, heat):
    rng = np.random.default_rng(5)
    for model, grid in ((delay, TrajectoryGrid.midpoint(0.6, 7)), (heat, TrajectoryGrid.infinite(1.0, 30))):
        x = rng.normal(size=model.dim)
        z = rng.normal(size=grid.size * model.n_features)
        lhs = upsilon_apply(model, grid, x) @ z
        rhs = model.inner(x, upsilon_adjoint_apply(model, grid, z))
        assert lhs == pytest.approx(rhs, rel=1e-10)
        assert np.allclose(upsilon_rows(model, grid, x[None, :])[0], upsilon_apply(model, grid, x))


def test_trajectory_grid_validation():
    with pytest.raises(ValueError):
        TrajectoryGrid(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        TrajectoryGrid.infinite(0.0, 10)
    g = TrajectoryGrid.midpoint(2.0, 4)
    assert g.horizon == pytest.approx(2.0) and g.size == 4


@pytest.mark.parametrize("build", [lambda: scalar_model(), lambda: build_heat_model(HeatConfig(n_modes=6)),
                                   lambda: build_delay_model(DelayConfig(m_lag=20))])
def test_model_round_trip(build):
    m = build()
    m2 = model_from_dict(m.to_dict())
    x = np.random.default_rng(0).normal(size=m.dim)
    assert np.allclose(m.semigroup(0.3, x[None, :]), m2.semigroup(0.3, x[None, :]))
    assert np.allclose(m.noise_cov(0.3), m2.noise_cov(0.3))
