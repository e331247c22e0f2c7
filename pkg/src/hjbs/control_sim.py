"""Forward simulation of the controlled OU dynamics and Monte-Carlo cross-checks of the HJB value."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import rng
from .hjb import ControlSet, CostSpec, ValueField, evaluate_value, features_for
from .models import DelayModel
from .ou_core import GaussianMeasure, StateVector, as_array


@dataclass
class Policy:
    """constant u, piecewise-constant schedule, or feedback (t, X rows) -> U rows."""

    name: str
    kind: str
    u: np.ndarray | None = None
    times: np.ndarray | None = None
    controls: np.ndarray | None = None
    feedback: Callable | None = None
    control_set: ControlSet | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "schedule", "feedback"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "constant":
            self.u = np.atleast_1d(np.asarray(self.u, dtype=float))
            self._check(self.u[None, :])
        elif self.kind == "schedule":
            self.times = np.asarray(self.times, dtype=float)
            self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
            if self.controls.shape[0] == 1 and len(self.times) > 1:
                self.controls = self.controls.T
            if len(self.times) != len(self.controls) or np.any(np.diff(self.times) <= 0):
                raise ValueError("schedule needs increasing times, one control row each")
            self._check(self.controls)
        elif self.feedback is None:
            raise ValueError("feedback policy needs a callable")

    def _check(self, U: np.ndarray) -> None:
        if self.control_set is None:
            return
        for u in U:
            if not self.control_set.contains(u):
                raise ValueError(f"policy {self.name!r} leaves the control set: {u}")

    @classmethod
    def constant(cls, u, control_set: ControlSet | None = None, name: str | None = None) -> "Policy":
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return cls(name or "const[" + ",".join(repr(float(c)) for c in u) + "]", "constant", u=u,
                   control_set=control_set)

    @classmethod
    def schedule(cls, times, controls, control_set: ControlSet | None = None, name: str = "schedule") -> "Policy":
        return cls(name, "schedule", times=times, controls=controls, control_set=control_set)

    def controls_at(self, t: float, X: np.ndarray) -> np.ndarray:
        n = len(X)
        if self.kind == "constant":
            return np.broadcast_to(self.u, (n, len(self.u))).copy()
        if self.kind == "schedule":
            i = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1))
            return np.broadcast_to(self.controls[i], (n, self.controls.shape[1])).copy()
        U = np.atleast_2d(np.asarray(self.feedback(t, X), dtype=float))
        if self.control_set is not None:
            bad = ~np.array([self.control_set.contains(u) for u in np.unique(U, axis=0)])
            if np.any(bad):
                raise ValueError(f"feedback policy {self.name!r} produced a control outside U")
        return U


@dataclass
class PathSample:
    times: np.ndarray
    features: np.ndarray
    controls: np.ndarray
    cost: np.ndarray | None = None
    states: np.ndarray | None = None
    native: np.ndarray | None = None

    def __post_init__(self):
        steps = np.diff(self.times)
        if len(steps) and np.ptp(steps) > 1e-9 * max(1.0, self.times[-1]):
            raise ValueError("time grid must be uniform")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite trajectory")


def _n_steps(t0: float, T: float, dt: float) -> int:
    if not dt > 0 or not T > t0:
        raise ValueError("need dt > 0 and T > t0")
    return max(1, int(round((T - t0) / dt)))


def simulate_state(model, policy: Policy, t0: float, x_bar, T: float, dt: float, seed: int, n_paths: int = 1,
                   keys=("sim",), costs: CostSpec | None = None, native_history: Callable | None = None,
                   native_atoms=None, store_states: bool = False) -> PathSample:
    """Exact-in-distribution stepping of the controlled OU process.

    Each step draws N(0, Q_dt) noise, applies e^{dt A} to the state and adds
    the control held over the step (midpoint time for open-loop policies,
    left-point state for feedback).  With ``native_history`` (the control
    history u(theta), theta < 0) a delay model is also integrated directly on
    R^n with the same noise, the delayed control read at the step midpoint.
    """
    n = _n_steps(t0, T, dt)
    dt = (T - t0) / n
    times = t0 + dt * np.arange(n + 1)
    x = x_bar if isinstance(x_bar, StateVector) else StateVector(as_array(x_bar))
    if x.has_atoms:
        raise ValueError("simulation starts from an ordinary state")
    X = np.repeat(x.coords[None, :], n_paths, axis=0)
    S = GaussianMeasure(np.zeros(model.n_noise), model.noise_cov(dt)).sqrt_factor
    nf = model.n_features
    feats = np.empty((n_paths, n + 1, nf))
    feats[:, 0] = model.proj_rows(0.0, X) if isinstance(model, DelayModel) else X @ model.F.T
    U_all = np.empty((n_paths, n, model.n_controls))
    states = np.empty((n_paths, n + 1, model.dim)) if store_states else None
    if store_states:
        states[:, 0] = X
    native = None
    if native_history is not None:
        if not isinstance(model, DelayModel):
            raise ValueError("native simulation is for delay models")
        atoms = native_atoms if native_atoms is not None else list(zip(model.atom_lags, model.atom_weights))
        native = np.empty((n_paths, n + 1, model.n))
        native[:, 0] = x.coords[: model.n]
        E = model.ea(dt)
        Phi = model.Phi(dt)[0]
    cost = np.zeros(n_paths) if costs is not None else None
    for k in range(n):
        t = times[k]
        probe_t = t + 0.5 * dt if policy.kind != "feedback" else t
        U = policy.controls_at(probe_t, X)
        U_all[:, k] = U
        W = rng.standard_normal(seed, (n_paths, S.shape[1]), *keys, k) @ S.T
        X = model.semigroup(dt, X) + model.control_increment(dt, U) + model.embed_noise(W)
        if store_states:
            states[:, k + 1] = X
        feats[:, k + 1] = model.proj_rows(0.0, X) if isinstance(model, DelayModel) else X @ model.F.T
        if native is not None:
            mid = t + 0.5 * dt
            drive = U @ model.b0.T
            for lag, wgt in atoms:
                wgt = np.asarray(wgt, dtype=float).reshape(model.n, model.n_controls)
                s = mid + lag
                if s < t0:
                    past = np.atleast_1d(np.asarray(native_history(s - t0), dtype=float))
                    drive = drive + (wgt @ past)[None, :]
                else:
                    j = min(int(np.floor((s - t0) / dt)), k)
                    drive = drive + U_all[:, j] @ wgt.T
            native[:, k + 1] = native[:, k] @ E.T + drive @ Phi.T + W[:, : model.n]
        if cost is not None:
            cost += dt * costs.hamiltonian.ell1(U)
    if cost is not None:
        if not costs.ell0_is_zero:
            run = np.stack([costs.ell0_bar(s, feats[:, i]) for i, s in enumerate(times)], axis=1)
            cost += dt * (run[:, 1:-1].sum(axis=1) + 0.5 * (run[:, 0] + run[:, -1]))
        cost += costs.phi_bar(feats[:, -1])
    return PathSample(times, feats, U_all, cost, states, native)


def evaluate_cost(model, costs: CostSpec, policy: Policy, t: float, x_bar, T: float, dt: float, n_paths: int,
                  seed: int, keys=("cost",)) -> dict:
    """Monte-Carlo cost of ``policy`` from (t, x_bar): mean and standard error."""
    path = simulate_state(model, policy, t, x_bar, T, dt, seed, n_paths, keys, costs)
    J = path.cost
    return {"J": float(J.mean()), "std_err": float(J.std(ddof=1) / np.sqrt(len(J))) if len(J) > 1 else 0.0}


def greedy_policy(w: ValueField, model, costs: CostSpec, name: str = "greedy") -> Policy:
    """u(t, x) = argmin_u <grad^C v(t, x), u> + l1(u), gradients read from the value grid."""
    spec = costs.hamiltonian
    if len(spec.controls.points) == 1:
        return Policy.constant(spec.controls.points[0], spec.controls, name)
    fs = features_for(w, model)

    def feedback(t, X):
        tau = max(w.T - t, 0.0)
        if tau <= 0:
            return np.broadcast_to(spec.controls.points[0], (len(X), spec.m)).copy()
        Y = fs.from_rows(tau, X)
        return spec.argmin(w.grad_at(tau, Y))

    return Policy(name, "feedback", feedback=feedback, control_set=spec.controls)


@dataclass
class CrossValRow:
    probe_t: float
    probe_features: tuple
    V_hjb: float
    policy_name: str
    J: float
    std_err: float
    gap: float
    passed: bool


def cost_scale(costs: CostSpec, T: float) -> float:
    return max(costs.phi_sup + T * costs.ell0_sup + T * float(np.max(np.abs(costs.hamiltonian.values))), 1e-12)


def cross_validate(model, costs: CostSpec, w: ValueField, policies, probes, budgets: dict, seed: int) -> dict:
    """Dominance of the HJB value over simulated policy costs at each probe.

    ``budgets``: n_paths, dt, tol (solver tolerance).  Policies at a probe
    share their random numbers.  The greedy row also checks the gap
    J_greedy - V <= max(0.05 * cost scale, 5 std_err); with a single control
    the only policy must match the value within 3 std_err + 5 tol.
    """
    n_paths = int(budgets.get("n_paths", 4000))
    dt = float(budgets.get("dt", 0.01))
    tol = float(budgets.get("tol", 1e-3))
    fs = features_for(w, model)
    scale = cost_scale(costs, w.T)
    singleton = len(costs.hamiltonian.controls.points) == 1
    rows = []
    for j, (t, x) in enumerate(probes):
        V = evaluate_value(w, t, x, model, fs)["value"]
        feats = tuple(float(v) for v in fs.from_state(max(w.T - t, 0.0), x))
        for pol in policies:
            if t >= w.T:
                J, se = float(costs.phi_bar(fs.terminal(np.array([feats])))[0]), 0.0
            else:
                r = evaluate_cost(model, costs, pol, t, x, w.T, dt, n_paths, seed, ("crossval", j))
                J, se = r["J"], r["std_err"]
            gap = J - V
            ok = V <= J + 3 * se + tol
            if singleton:
                ok = ok and abs(V - J) <= 3 * se + 5 * tol
            if pol.name == "greedy":
                ok = ok and gap <= max(0.05 * scale, 5 * se)
            rows.append(CrossValRow(float(t), feats, float(V), pol.name, float(J), float(se), float(gap), bool(ok)))
    return {"rows": rows, "all_passed": all(r.passed for r in rows), "cost_scale": scale}


CROSSVAL_COLUMNS = ("probe_t", "probe_features", "V_hjb", "policy_name", "J", "std_err", "gap", "pass")


def _g(x: float) -> str:
    return "%.17g" % x


def write_crossval_csv(path, report: dict) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CROSSVAL_COLUMNS)
        for r in report["rows"]:
            wr.writerow([_g(r.probe_t), ";".join(_g(v) for v in r.probe_features), _g(r.V_hjb), r.policy_name,
                         _g(r.J), _g(r.std_err), _g(r.gap), "1" if r.passed else "0"])


def write_paths_csv(path, sample: PathSample, max_paths: int = 10) -> None:
    """Long-format trajectories: path, t, feature columns, control columns."""
    nf = sample.features.shape[2]
    m = sample.controls.shape[2]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["path", "t"] + [f"y{i}" for i in range(nf)] + [f"u{i}" for i in range(m)])
        for p in range(min(max_paths, len(sample.features))):
            for k, t in enumerate(sample.times):
                u = sample.controls[p, min(k, len(sample.controls[p]) - 1)]
                wr.writerow([str(p), _g(t)] + [_g(v) for v in sample.features[p, k]] + [_g(v) for v in u])


def lift_consistency(model_factory, history: Callable, policy: Policy, x0, T: float, levels, seed: int,
                     n_paths: int = 200, atoms=None) -> list:
    """max |native - lifted| first component for each (dt, m_lag) level, shared noise within a level."""
    out = []
    for dt, m_lag in levels:
        model = model_factory(m_lag)
        x = model.history_state(x0, history)
        ps = simulate_state(model, policy, 0.0, x, T, dt, seed, n_paths, ("lift", m_lag), native_history=history,
                            native_atoms=atoms)
        out.append({"dt": dt, "m_lag": m_lag, "error": float(np.max(np.abs(ps.native - ps.features)))})
    return out
