import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import ou_scalar_mean_var
from hjbs.models import DelayConfig, TrajectoryGrid, build_delay_model, scalar_model, upsilon_control_matrix
from hjbs.smoothing import (InclusionError, VerifySettings, c_gradient_base, c_gradient_convolution,
                            c_gradient_lifted, convolution_bound, delay_dual_terms, finite_difference_c_gradient,
                            fit_exponent, lambda_base, lambda_conv, lambda_lifted, verify_hypotheses,
                            write_lambda_report)


@given(st.floats(1e-3, 3.0))
def test_scalar_lambda_closed_form(t):
    lam = lambda_base(scalar_model(), t)
    _, var = ou_scalar_mean_var(0.0, t)
    assert lam.report.operator_norm == pytest.approx(np.exp(-t) / np.sqrt(var), rel=1e-10)
    assert lam.report.range_residual < 1e-12


def test_inclusion_failure_without_noise():
    m = scalar_model(g=0.0)
    with pytest.raises(InclusionError):
        lambda_base(m, 0.5)
    assert lambda_base(m, 0.5, check=False).report.range_residual == pytest.approx(1.0)


def test_lambda_needs_positive_time(scalar):
    with pytest.raises(ValueError):
        lambda_base(scalar, 0.0)


def test_scalar_gradient_against_closed_form(scalar):
    # d/dx R_t[sin](x) = e^{-t} cos(e^{-t} x) e^{-Q_t/2}
    t, x = 0.4, 0.7
    g = c_gradient_base(lambda Y: np.sin(Y[:, 0]), scalar, t, np.array([x]), 200000, 11)
    mean, var = ou_scalar_mean_var(x, t)
    exact = np.exp(-t) * np.cos(mean) * np.exp(-var / 2)
    assert abs(g.value[0] - exact) <= 3 * g.std_err[0]


def test_finite_difference_oracle_closed_form(scalar):
    t, x = 0.4, 0.7
    est, se = finite_difference_c_gradient(lambda Y: np.sin(Y[:, 0]), scalar, t, np.array([x]), 0, 1e-3, 50000, 2,
                                           return_stderr=True)
    mean, var = ou_scalar_mean_var(x, t)
    assert abs(est - np.exp(-t) * np.cos(mean) * np.exp(-var / 2)) <= 3 * se + 1e-6


def test_commuting_projection_base_equals_lifted(heat):
    # P = e1 is an eigenvector of the generator, so the lifted operator collapses to the base one
    grid = TrajectoryGrid.infinite(1.0, 60)
    for t in (0.005, 0.05):
        lam_b = lambda_base(heat, t).report.operator_norm
        lam_l = lambda_lifted(heat, grid, t).report.operator_norm
        assert lam_b == pytest.approx(lam_l, rel=1e-6)


def test_conv_equals_lifted_on_the_same_finite_grid(heat):
    grid = TrajectoryGrid.midpoint(0.05, 6)
    for dt in (0.002, 0.02):
        a = lambda_conv(heat, grid, dt).report.operator_norm
        b = lambda_lifted(heat, grid, dt).report.operator_norm
        assert a == pytest.approx(b, rel=0.05)


@given(st.integers(0, 10**6), st.floats(0.001, 0.4), st.floats(0.01, 0.5))
def test_dual_terms_sum_and_vanishing(delay, seed, dt, s):
    grid = TrajectoryGrid.midpoint(s, 5)
    z = np.random.default_rng(seed).normal(size=grid.size * delay.n)
    I, II = delay_dual_terms(delay, grid, dt, z)
    full = upsilon_control_matrix(delay, grid, dt).T @ z
    assert np.allclose(I + II, full, atol=1e-12)
    if s + dt < delay.eps_delay:
        assert np.all(II == 0.0)


def test_dual_term_nonzero_past_the_lag():
    m = build_delay_model(DelayConfig(m_lag=20, eps_delay=0.5, atoms=((-0.5, 1.0),)))
    grid = TrajectoryGrid.midpoint(0.45, 5)
    _, II = delay_dual_terms(m, grid, 0.1, np.ones(5))
    assert np.all(II != 0.0)


def test_fit_exponent_recovers_power_law():
    t = np.logspace(-3, -1, 9)
    fit = fit_exponent(t, 2.5 * t**-0.37)
    assert fit.gamma == pytest.approx(0.37) and fit.kappa == pytest.approx(2.5) and fit.r2 == pytest.approx(1.0)


def test_verify_scalar_and_report(tmp_path, scalar):
    res = verify_hypotheses(scalar, VerifySettings(variants=("base",)))
    assert res.all_passed
    assert res.fits["base"].gamma == pytest.approx(0.5, abs=0.02)
    path = tmp_path / "r.csv"
    write_lambda_report(path, "scalar", res)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["model", "variant", "t", "s", "norm", "range_residual", "fitted_kappa", "fitted_gamma",
                       "pass"]
    assert len(rows) == 10 and all(r[-1] == "true" for r in rows[1:])
    assert float(rows[1][4]) == res.reports[0].operator_norm


def test_verify_flags_conv_rows_past_the_lag():
    m = build_delay_model(DelayConfig(m_lag=50, eps_delay=0.5, atoms=((-0.5, 1.0),)))
    res = verify_hypotheses(m, VerifySettings(variants=("conv",), conv_s=0.45))
    assert not res.all_passed
    assert any(r.flagged and not r.passed for r in res.reports)


def test_convolution_gradient_magnitude_within_bound(delay):
    x = np.random.default_rng(0).normal(size=delay.dim)
    t = 0.3
    f = lambda s, P, nodes: np.cos(P[:, -1, 0])
    g = c_gradient_convolution(f, delay, t, x, 20000, 8, 1)
    ts = np.logspace(-3, np.log10(t), 15)
    norms = [lambda_conv(delay, TrajectoryGrid.midpoint(0.05, 4), u).report.operator_norm for u in ts]
    kappa = max(n * u**0.5 for n, u in zip(norms, ts))
    assert abs(g.value[0]) <= 2 * convolution_bound(1.0, kappa, 0.5, 0.0, t)
