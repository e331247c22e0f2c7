"""Partial smoothing: Lambda operators, hypothesis checks and C-gradient estimators.

For a model with projection P, control operator C and OU covariance Q_t the
three operators are

* base:        Lambda(t)      = (P Q_t P^*)^{-1/2} P e^{tA} C
* lifted:      Lambda_hat(t)  = (Ups Q_t Ups^*)^{-1/2} Ups e^{tA} C
* convolution: Lambda_hat_s(t - s), the lifted operator on a path grid over (0, s]

where Ups stacks weighted projected trajectories r -> P e^{rA} x on a
TrajectoryGrid.  Each C-gradient estimator is the Cameron-Martin
(likelihood-ratio) derivative E[phi(Y) <Lambda k, Sigma^{-1/2}(Y - mean)>] for
the matching Gaussian Y; the finite-difference functions are the independent
oracle, shifting the initial state along C k and reusing the same draws.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import beta as beta_fn

from .models import (
    DelayModel,
    TrajectoryGrid,
    upsilon_control_matrix,
    upsilon_noise_matrix,
)
from .ou_core import DEFAULT_CUTOFF, GaussianMeasure, PsdFactor, QuadratureRule, StateVector, as_array

INCLUSION_TOL = 1e-4


class InclusionError(ValueError):
    """The control image is not in the retained range of the covariance."""

    def __init__(self, report: "LambdaReport"):
        super().__init__(f"range inclusion fails at t={report.t:g}: residual {report.range_residual:.3e}")
        self.report = report


@dataclass
class LambdaReport:
    variant: str
    t: float
    operator_norm: float
    range_residual: float
    rank: int
    s: float | None = None
    fitted_kappa: float | None = None
    fitted_gamma: float | None = None
    flagged: bool = False
    passed: bool | None = None

    def __post_init__(self):
        if self.operator_norm < 0 or self.range_residual < 0:
            raise ValueError("norm and residual must be non-negative")


@dataclass
class CGradient:
    value: np.ndarray
    std_err: np.ndarray
    n_samples: int

    def __post_init__(self):
        self.value = np.atleast_1d(np.asarray(self.value, dtype=float))
        self.std_err = np.atleast_1d(np.asarray(self.std_err, dtype=float))
        if np.any(self.std_err < 0):
            raise ValueError("negative standard error")


@dataclass
class LambdaOperator:
    """Lambda in the retained eigenbasis of the Gram matrix, plus that basis.

    ``matrix`` maps control directions to retained coordinates; the score of
    a centred Gaussian draw g (in the Gram's ambient coordinates) along
    control k is ``whiten(g) @ matrix[:, k]``.
    """

    factor: PsdFactor
    matrix: np.ndarray
    report: LambdaReport

    @property
    def ambient(self) -> np.ndarray:
        return self.factor.vecs @ self.matrix

    def scores(self, G: np.ndarray) -> np.ndarray:
        """Scores for rows of centred draws, shape (n, n_controls)."""
        return ((G @ self.factor.vecs) / np.sqrt(self.factor.vals)) @ self.matrix


def _noise_sqrt(model, t: float) -> np.ndarray:
    return GaussianMeasure(np.zeros(model.n_noise), model.noise_cov(t)).sqrt_factor


def _assemble(variant: str, noise_map: np.ndarray, control: np.ndarray, model, t: float,
              cutoff: float, check: bool, s: float | None = None, flagged: bool = False) -> LambdaOperator:
    fac = PsdFactor.from_factor(noise_map @ _noise_sqrt(model, t), cutoff)
    res = fac.range_residual(control) if np.any(control) else 0.0
    lam = fac.whiten(control) if fac.rank else np.zeros((0, control.shape[1]))
    norm = float(np.linalg.norm(lam, 2)) if lam.size else 0.0
    rep = LambdaReport(variant, float(t), norm, res, fac.rank, s=s, flagged=flagged)
    if check and res > INCLUSION_TOL:
        raise InclusionError(rep)
    return LambdaOperator(fac, lam, rep)


def lambda_base(model, t: float, cutoff: float = DEFAULT_CUTOFF, check: bool = True) -> LambdaOperator:
    """(P Q_t P^*)^{-1/2} P e^{tA} C."""
    if not t > 0:
        raise ValueError("lambda_base needs t > 0")
    return _assemble("base", model.path_map(0.0), model.proj_control(t), model, t, cutoff, check)


def lambda_lifted(model, grid: TrajectoryGrid, t: float, cutoff: float = DEFAULT_CUTOFF,
                  check: bool = True) -> LambdaOperator:
    """(Ups Q_t Ups^*)^{-1/2} Ups e^{tA} C on the trajectory grid."""
    if not t > 0:
        raise ValueError("lambda_lifted needs t > 0")
    return _assemble("lifted", upsilon_noise_matrix(model, grid), upsilon_control_matrix(model, grid, t),
                     model, t, cutoff, check)


def lambda_conv(model, s_grid: TrajectoryGrid, dt: float, cutoff: float = DEFAULT_CUTOFF,
                check: bool = True) -> LambdaOperator:
    """Lifted operator on a (0, s] path grid at time gap dt = t - s.

    For delay models the row is flagged when t = s + dt reaches eps_delay,
    beyond which the vanishing of the delayed-control term is not available.
    """
    if not dt > 0:
        raise ValueError("lambda_conv needs dt > 0")
    if s_grid.rho != 0:
        raise ValueError("convolution grids are finite-horizon (rho = 0)")
    s = s_grid.horizon
    flagged = isinstance(model, DelayModel) and s + dt >= model.eps_delay
    return _assemble("conv", upsilon_noise_matrix(model, s_grid), upsilon_control_matrix(model, s_grid, dt),
                     model, dt, cutoff, check, s=s, flagged=flagged)


def delay_dual_terms(model: DelayModel, s_grid: TrajectoryGrid, dt: float, z: np.ndarray):
    """Split B^* e^{dt A^*} Ups_s^* z into the undelayed (b0) and point-mass (b1) parts.

    With z_j the blocks of z, the second component of e^{dt A^*} Ups_s^* z at
    lag xi is sum_j sqrt(w_j) 1[xi >= -(dt + r_j)] e^{(r_j + dt + xi) a0^T} z_j,
    so the b1 part only collects atoms with xi_i >= -(dt + r_j).  The
    indicator is evaluated symbolically: inactive terms are never summed.
    Returns (I, II), each of length n_controls.
    """
    z = np.asarray(z, dtype=float).reshape(s_grid.size, model.n)
    sw = s_grid.sqrt_weights
    first = np.zeros(model.n)
    for rj, wj, zj in zip(s_grid.nodes, sw, z):
        first += wj * (model.ea(rj + dt).T @ zj)
    term_i = model.b0.T @ first
    term_ii = np.zeros(model.m)
    for lag, w in zip(model.atom_lags, model.atom_weights):
        for rj, wj, zj in zip(s_grid.nodes, sw, z):
            if lag >= -(dt + rj):
                term_ii = term_ii + wj * (w.T @ (model.ea(rj + dt + lag).T @ zj))
    return term_i, term_ii


# ---------------------------------------------------------------- verification

@dataclass
class ExponentFit:
    kappa: float
    gamma: float
    r2: float
    n_points: int


def fit_exponent(ts, norms) -> ExponentFit:
    """Least squares of log norm = log kappa - gamma log t."""
    x = np.log(np.asarray(ts, dtype=float))
    y = np.log(np.asarray(norms, dtype=float))
    if len(x) < 2:
        return ExponentFit(float("nan"), float("nan"), float("nan"), len(x))
    slope, icept = np.polyfit(x, y, 1)
    resid = y - (slope * x + icept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return ExponentFit(float(np.exp(icept)), float(-slope), float(r2), len(x))


@dataclass
class VerifySettings:
    variants: tuple = ("base",)
    t_grid: np.ndarray = field(default_factory=lambda: np.logspace(-3, -1, 9))
    lifted_grid: TrajectoryGrid | None = None
    conv_s: float = 0.05
    conv_nodes: int = 8
    cutoff: float = DEFAULT_CUTOFF
    lifted_cutoff: float | None = None
    knee: float | None = None
    horizon: float = 1.0
    r2_min: float = 0.95
    gamma_range: tuple = (0.0, 1.0)
    bound_slack: float = 0.1


@dataclass
class VerifyResult:
    reports: list
    fits: dict
    passed: dict

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())


def _variant_reports(model, variant: str, cfg: VerifySettings, threads: int) -> list:
    ts = np.asarray(cfg.t_grid, dtype=float)

    def one(t):
        if variant == "base":
            return lambda_base(model, t, cfg.cutoff, check=False).report
        if variant == "lifted":
            grid = cfg.lifted_grid or TrajectoryGrid.infinite(1.0, 100)
            return lambda_lifted(model, grid, t, cfg.lifted_cutoff or cfg.cutoff, check=False).report
        if variant == "conv":
            grid = TrajectoryGrid.midpoint(cfg.conv_s, cfg.conv_nodes)
            return lambda_conv(model, grid, t, cfg.cutoff, check=False).report
        raise ValueError(f"unknown variant {variant!r}")

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, ts))
    return [one(t) for t in ts]


def verify_hypotheses(model, settings: VerifySettings | None = None, threads: int = 1) -> VerifyResult:
    """Run the requested Lambda variants over the t-grid and fit (kappa, gamma).

    A variant passes when every row has range residual <= 1e-4, no row is
    flagged, the fitted exponent lies inside ``gamma_range`` with R^2 above
    ``r2_min``, and ||Lambda(t)|| <= (1 + slack) kappa (t^{-gamma} v 1) at
    every probe with the fitted constants.  For the convolution variant the
    fitted variable is the gap dt = t - s.
    """
    cfg = settings or VerifySettings()
    ts = np.asarray(cfg.t_grid, dtype=float)
    knee = cfg.knee if cfg.knee is not None else 0.1 * cfg.horizon
    reports, fits, passed = [], {}, {}
    for variant in cfg.variants:
        reps = _variant_reports(model, variant, cfg, threads)
        use = [(t, r.operator_norm) for t, r in zip(ts, reps) if t <= knee and r.operator_norm > 0]
        fit = fit_exponent([u[0] for u in use], [u[1] for u in use])
        fits[variant] = fit
        ok_fit = (np.isfinite(fit.gamma) and cfg.gamma_range[0] < fit.gamma < cfg.gamma_range[1]
                  and fit.r2 >= cfg.r2_min)
        all_ok = ok_fit
        for t, r in zip(ts, reps):
            r.fitted_kappa, r.fitted_gamma = fit.kappa, fit.gamma
            bound = (1 + cfg.bound_slack) * fit.kappa * max(t ** (-fit.gamma), 1.0) if ok_fit else np.inf
            r.passed = bool(ok_fit and r.range_residual <= INCLUSION_TOL and not r.flagged
                            and r.operator_norm <= bound)
            all_ok = all_ok and r.passed
        passed[variant] = bool(all_ok)
        reports.extend(reps)
    return VerifyResult(reports, fits, passed)


REPORT_COLUMNS = ("model", "variant", "t", "s", "norm", "range_residual", "fitted_kappa", "fitted_gamma", "pass")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return str(x)


def write_lambda_report(path, model_name: str, result: VerifyResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in result.reports:
            t = r.t + r.s if r.s is not None else r.t
            w.writerow([model_name, r.variant, _fmt(t), _fmt(r.s), _fmt(r.operator_norm), _fmt(r.range_residual),
                        _fmt(r.fitted_kappa), _fmt(r.fitted_gamma), _fmt(r.passed)])


# ---------------------------------------------------------------- gradients

def _state(x_bar) -> StateVector:
    return x_bar if isinstance(x_bar, StateVector) else StateVector(as_array(x_bar))


def _noise(model, t: float, n_mc: int, seed: int, keys) -> np.ndarray:
    return GaussianMeasure(np.zeros(model.n_noise), model.noise_cov(t)).sample(n_mc, seed, *keys)


def _lr_estimate(vals: np.ndarray, scores: np.ndarray) -> CGradient:
    prod = vals[:, None] * scores
    n = len(vals)
    se = prod.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(prod.shape[1])
    return CGradient(prod.mean(axis=0), se, n)


def c_gradient_base(phi_bar, model, t: float, x_bar, n_mc: int, seed: int, cutoff: float = DEFAULT_CUTOFF,
                    keys=("mc",)) -> CGradient:
    """E[phi(P X(t)) <Lambda(t) k, (P Q_t P^*)^{-1/2} P W_A(t)>] for each control direction k.

    ``phi_bar`` maps rows of projected states (n, n_features) to (n,).
    """
    lam = lambda_base(model, t, cutoff)
    mean = model.project(t, _state(x_bar))
    Z = _noise(model, t, n_mc, seed, keys) @ model.path_map(0.0).T
    vals = np.asarray(phi_bar(mean + Z), dtype=float)
    return _lr_estimate(vals, lam.scores(Z))


def lifted_paths(model, grid: TrajectoryGrid, t: float, x_bar, W: np.ndarray) -> np.ndarray:
    """Unweighted projected trajectories P e^{t_j A} X(t) for noise rows W, shape (n, M, n_features)."""
    x = _state(x_bar)
    means = np.stack([model.project(tj + t, x) for tj in grid.nodes])
    noise = np.stack([W @ model.path_map(tj).T for tj in grid.nodes], axis=1)
    return means[None] + noise


def c_gradient_lifted(phi_hat, model, grid: TrajectoryGrid, t: float, x_bar, n_mc: int, seed: int,
                      cutoff: float = DEFAULT_CUTOFF, keys=("mc",)) -> CGradient:
    """Lifted formula: phi_hat sees the trajectory (n, M, n_features) at the grid nodes."""
    lam = lambda_lifted(model, grid, t, cutoff)
    W = _noise(model, t, n_mc, seed, keys)
    paths = lifted_paths(model, grid, t, x_bar, W)
    vals = np.asarray(phi_hat(paths), dtype=float)
    return _lr_estimate(vals, lam.scores(W @ upsilon_noise_matrix(model, grid).T))


def _check_eta(eta: float) -> None:
    if not 0 <= eta < 1:
        raise ValueError("singularity exponent eta must lie in [0, 1)")


def _conv_pass(f_hat, model, t, x_bar, n_mc, n_time, seed, m_path, cutoff, keys, with_grad=True):
    """Shared loop of the convolution estimators over the graded time rule on (0, t)."""
    x = _state(x_bar)
    rule = QuadratureRule.graded(0.0, t, n_time)
    val, var_val = 0.0, 0.0
    grad = np.zeros(model.n_controls)
    var_grad = np.zeros(model.n_controls)
    for q, (s, w) in enumerate(zip(rule.nodes, rule.weights)):
        grid = TrajectoryGrid.midpoint(s, m_path)
        dt = t - s
        W = _noise(model, dt, n_mc, seed, tuple(keys) + (q,))
        paths = lifted_paths(model, grid, dt, x, W)
        fv = np.asarray(f_hat(s, paths, grid.nodes), dtype=float)
        val += w * fv.mean()
        var_val += w**2 * (fv.var(ddof=1) if n_mc > 1 else 0.0) / n_mc
        if with_grad:
            lam = lambda_conv(model, grid, dt, cutoff)
            prod = fv[:, None] * lam.scores(W @ upsilon_noise_matrix(model, grid).T)
            grad += w * prod.mean(axis=0)
            var_grad += w**2 * (prod.var(axis=0, ddof=1) if n_mc > 1 else 0.0) / n_mc
    return val, np.sqrt(var_val), grad, np.sqrt(var_grad)


def c_gradient_convolution(f_hat, model, t: float, x_bar, n_mc: int, n_time: int, seed: int, eta: float = 0.0,
                           m_path: int = 4, cutoff: float = DEFAULT_CUTOFF, keys=("conv",)) -> CGradient:
    """C-gradient of x -> int_0^t R_{t-s}[f(s, .)](x) ds.

    ``f_hat(s, paths, nodes)`` receives the projected trajectory of X(t - s)
    on ``m_path`` midpoint nodes of (0, s] (so it only sees the path up to s)
    and returns one value per sample.  Each time node uses Lambda_hat_s(t - s).
    """
    _check_eta(eta)
    if not t > 0:
        raise ValueError("t must be positive")
    _, _, g, se = _conv_pass(f_hat, model, t, x_bar, n_mc, n_time, seed, m_path, cutoff, keys)
    return CGradient(g, se, n_mc)


def convolution_value(f_hat, model, t: float, x_bar, n_mc: int, n_time: int, seed: int, m_path: int = 4,
                      keys=("conv",)):
    """Monte-Carlo int_0^t R_{t-s}[f(s, .)](x) ds on the same rule and draws as the gradient."""
    v, se, _, _ = _conv_pass(f_hat, model, t, x_bar, n_mc, n_time, seed, m_path, DEFAULT_CUTOFF, keys,
                             with_grad=False)
    return v, se


def shifted_state(model, x_bar, k: int, alpha: float) -> StateVector:
    """x_bar + alpha C e_k as an extended state (point masses kept exactly for delay models)."""
    x = _state(x_bar)
    e = np.zeros(model.n_controls)
    e[k] = 1.0
    c = model.control_state(alpha * e)
    lags, masses = [], []
    for s in (x, c):
        if s.has_atoms:
            lags.append(s.atom_lags)
            masses.append(s.atom_masses)
    if lags:
        return StateVector(x.coords + c.coords, "H_bar", np.concatenate(lags), np.concatenate(masses))
    return StateVector(x.coords + c.coords, "H_bar")


def finite_difference_c_gradient(phi, model, t: float, x_bar, k: int, alpha: float, n_mc: int, seed: int,
                                 grid: TrajectoryGrid | None = None, keys=("mc",), return_stderr: bool = False):
    """Central difference of R_t[phi] along C e_k with common random numbers.

    Without ``grid`` phi acts on projected states (n, n_features); with a grid
    it acts on the projected trajectory (n, M, n_features), as in the lifted
    formula.  Both sides reuse one set of draws.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    W = _noise(model, t, n_mc, seed, keys)
    xp = shifted_state(model, x_bar, k, alpha)
    xm = shifted_state(model, x_bar, k, -alpha)
    if grid is None:
        Z = W @ model.path_map(0.0).T
        fp = np.asarray(phi(model.project(t, xp) + Z), dtype=float)
        fm = np.asarray(phi(model.project(t, xm) + Z), dtype=float)
    else:
        fp = np.asarray(phi(lifted_paths(model, grid, t, xp, W)), dtype=float)
        fm = np.asarray(phi(lifted_paths(model, grid, t, xm, W)), dtype=float)
    d = (fp - fm) / (2 * alpha)
    est = float(d.mean())
    if return_stderr:
        return est, float(d.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0
    return est


def finite_difference_convolution(f_hat, model, t: float, x_bar, k: int, alpha: float, n_mc: int, n_time: int,
                                  seed: int, m_path: int = 4, keys=("conv",)):
    """Central difference of the convolution integral along C e_k; returns (estimate, std_err)."""
    xp = shifted_state(model, x_bar, k, alpha)
    xm = shifted_state(model, x_bar, k, -alpha)
    rule = QuadratureRule.graded(0.0, t, n_time)
    est, var = 0.0, 0.0
    for q, (s, w) in enumerate(zip(rule.nodes, rule.weights)):
        grid = TrajectoryGrid.midpoint(s, m_path)
        dt = t - s
        W = _noise(model, dt, n_mc, seed, tuple(keys) + (q,))
        fp = np.asarray(f_hat(s, lifted_paths(model, grid, dt, xp, W), grid.nodes), dtype=float)
        fm = np.asarray(f_hat(s, lifted_paths(model, grid, dt, xm, W), grid.nodes), dtype=float)
        d = (fp - fm) / (2 * alpha)
        est += w * d.mean()
        var += w**2 * (d.var(ddof=1) if n_mc > 1 else 0.0) / n_mc
    return est, float(np.sqrt(var))


def convolution_bound(f_sup_weighted: float, kappa: float, gamma: float, eta: float, t: float) -> float:
    """sup|s^eta f| kappa B(1 - eta, 1 - gamma) t^{1 - eta - gamma}."""
    _check_eta(eta)
    return f_sup_weighted * kappa * beta_fn(1 - eta, 1 - gamma) * t ** (1 - eta - gamma)
