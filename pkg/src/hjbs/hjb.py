"""Mild HJB equation solved by contraction (Picard) iteration.

The backward equation for the value v(t, x) is solved in the forward variable
w(tau) = v(T - tau):

    w(tau) = R_tau[phi] + int_0^tau R_{tau-s}[H_min(grad^C w(s)) + l0(T - s)] ds

with H_min(p) = min_{u in U} (<p, u> + l1(u)).  The value is represented on a
tensor grid of features (projected state coordinates, or samples of the
projected trajectory for delay models), and every R-term is a Monte-Carlo
average over the exact Gaussian law of the feature vector.  Gradients come from
the Cameron-Martin formulas of ``hjbs.smoothing`` with the same draws, and the
same draws are reused at every iteration so the discrete map is a deterministic
contraction.
"""

from __future__ import annotations

import itertools
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.special import beta as beta_fn

from . import rng
from .models import DelayModel
from .ou_core import DEFAULT_CUTOFF, GaussianMeasure, PsdFactor, QuadratureRule, StateVector, as_array
from .smoothing import INCLUSION_TOL, InclusionError, LambdaReport, fit_exponent, lambda_base

FIELD_FORMAT_VERSION = 1


class HJBConvergenceError(RuntimeError):
    def __init__(self, message, field=None, report=None):
        super().__init__(message)
        self.field = field
        self.report = report


class ContractionError(HJBConvergenceError):
    pass


# ---------------------------------------------------------------- controls and costs

@dataclass(frozen=True)
class ControlSet:
    """A closed bounded control set and its finite grid (rows sorted lexicographically)."""

    kind: str
    points: np.ndarray
    params: tuple = ()

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if len(pts) == 0:
            raise ValueError("control set is empty")
        order = np.lexsort(pts.T[::-1])
        object.__setattr__(self, "points", pts[order])

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def box(cls, lo: float, hi: float, n: int, m: int = 1) -> "ControlSet":
        axis = np.linspace(lo, hi, int(n)) if n > 1 else np.array([0.5 * (lo + hi)])
        pts = np.array(list(itertools.product(axis, repeat=m)))
        return cls("box", pts, (float(lo), float(hi), int(n)))

    @classmethod
    def ball(cls, radius: float, n: int, m: int = 1) -> "ControlSet":
        axis = np.linspace(-radius, radius, int(n))
        pts = np.array(list(itertools.product(axis, repeat=m)))
        pts = pts[np.linalg.norm(pts, axis=1) <= radius * (1 + 1e-12)]
        return cls("ball", pts, (float(radius), int(n)))

    @classmethod
    def singleton(cls, u) -> "ControlSet":
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return cls("points", u[None, :], tuple(u.tolist()))

    @classmethod
    def parse(cls, text: str, m: int) -> "ControlSet":
        """``box:lo:hi:n``, ``ball:r:n`` or ``points:u1;u2`` (components comma separated)."""
        kind, _, rest = text.strip().partition(":")
        if kind == "box":
            lo, hi, n = rest.split(":")
            return cls.box(float(lo), float(hi), int(n), m)
        if kind == "ball":
            r, n = rest.split(":")
            return cls.ball(float(r), int(n), m)
        if kind == "points":
            pts = [[float(c) for c in p.split(",")] for p in rest.split(";")]
            if pts and len(pts[0]) == 1 and m > 1:
                pts = [p * m for p in pts]
            arr = np.array(pts, dtype=float)
            if arr.shape[1] != m:
                raise ValueError("control points have the wrong dimension")
            return cls("points", arr, tuple(map(tuple, pts)))
        raise ValueError(f"unknown control set {text!r}")

    def contains(self, u, tol: float = 1e-9) -> bool:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u.shape != (self.dim,) or not np.all(np.isfinite(u)):
            return False
        if self.kind == "box":
            lo, hi, _ = self.params
            return bool(np.all(u >= lo - tol) and np.all(u <= hi + tol))
        if self.kind == "ball":
            return bool(np.linalg.norm(u) <= self.params[0] + tol)
        return bool(np.min(np.linalg.norm(self.points - u, axis=1)) <= tol)

    def describe(self) -> str:
        if self.kind == "box":
            return "box:%r:%r:%d" % self.params
        if self.kind == "ball":
            return "ball:%r:%d" % self.params
        return "points:" + ";".join(",".join(repr(float(c)) for c in p) for p in self.points)


_SEPARABLE = ("zero", "quadratic", "abs")


def _ell1_registry(name: str) -> Callable:
    kind, _, arg = name.partition(":")
    c = float(arg) if arg else 1.0
    if kind == "zero":
        return lambda U: np.zeros(len(U))
    if kind == "quadratic":
        return lambda U: 0.5 * c * np.sum(U**2, axis=1)
    if kind == "abs":
        return lambda U: c * np.sum(np.abs(U), axis=1)
    raise ValueError(f"unknown control cost {name!r}")


class HamiltonianSpec:
    """H_min and its minimiser on the control grid."""

    def __init__(self, controls: ControlSet, ell1: str | Callable = "zero"):
        self.controls = controls
        self.ell1_name = ell1 if isinstance(ell1, str) else getattr(ell1, "__name__", "custom")
        self.ell1 = _ell1_registry(ell1) if isinstance(ell1, str) else ell1
        self.values = np.asarray(self.ell1(controls.points), dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("control cost must be finite on the grid")
        self.lipschitz_L = float(np.max(np.linalg.norm(controls.points, axis=1)))
        self._envelope = self._lower_envelope(controls.points[:, 0], self.values) if controls.dim == 1 else None
        # box sets with a coordinate-separable cost split into one envelope per coordinate
        self._separable = None
        if controls.dim > 1 and controls.kind == "box" and isinstance(ell1, str) and ell1.split(":")[0] in _SEPARABLE:
            lo, hi, n = controls.params
            axis = np.linspace(lo, hi, n) if n > 1 else np.array([0.5 * (lo + hi)])
            self._separable = self._lower_envelope(axis, _ell1_registry(ell1)(axis[:, None]))

    @staticmethod
    def _lower_envelope(u, values):
        """Lines p -> u p + l1(u) forming the minimum, with their breakpoints (scalar controls)."""
        order = np.lexsort((values, -u))
        hull: list = []
        for k in order:
            a, b = u[k], values[k]
            if hull and hull[-1][0] == a:
                continue
            while len(hull) >= 2:
                (a1, b1), (a2, b2) = hull[-2], hull[-1]
                if (b - b1) * (a1 - a2) <= (b2 - b1) * (a1 - a):
                    hull.pop()
                else:
                    break
            hull.append((a, b))
        slopes = np.array([h[0] for h in hull])
        icpt = np.array([h[1] for h in hull])
        breaks = (icpt[1:] - icpt[:-1]) / (slopes[:-1] - slopes[1:])
        return slopes, icpt, breaks

    @property
    def m(self) -> int:
        return self.controls.dim

    def _table(self, P: np.ndarray) -> np.ndarray:
        return P @ self.controls.points.T + self.values

    def h_min(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        shape = P.shape[:-1]
        if self._envelope is not None:
            slopes, icpt, breaks = self._envelope
            p = P[..., 0]
            k = np.searchsorted(breaks, p)
            return slopes[k] * p + icpt[k]
        if self._separable is not None:
            slopes, icpt, breaks = self._separable
            k = np.searchsorted(breaks, P)
            return (slopes[k] * P + icpt[k]).sum(axis=-1)
        flat = P.reshape(-1, self.m)
        out = np.empty(len(flat))
        step = max(1, 2**22 // max(1, len(self.values)))
        for i in range(0, len(flat), step):
            out[i : i + step] = self._table(flat[i : i + step]).min(axis=1)
        return out.reshape(shape)

    def argmin(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        shape = P.shape[:-1]
        flat = P.reshape(-1, self.m)
        idx = np.empty(len(flat), dtype=int)
        step = max(1, 2**22 // max(1, len(self.values)))
        for i in range(0, len(flat), step):
            idx[i : i + step] = self._table(flat[i : i + step]).argmin(axis=1)
        return self.controls.points[idx].reshape(shape + (self.m,))

    @property
    def h_zero(self) -> float:
        return float(self.values.min())


def hamiltonian_min(p, spec: HamiltonianSpec):
    out = spec.h_min(np.atleast_1d(np.asarray(p, dtype=float)))
    return float(out) if np.ndim(out) == 0 else out


def hamiltonian_argmin(p, spec: HamiltonianSpec) -> np.ndarray:
    return spec.argmin(np.atleast_1d(np.asarray(p, dtype=float)))


def lipschitz_constant(spec: HamiltonianSpec) -> float:
    return spec.lipschitz_L


def _state_cost_registry(name: str) -> tuple[Callable, float]:
    """Bounded evaluators on rows of projected states; returns (function, sup norm)."""
    kind, _, arg = name.partition(":")
    if kind == "zero":
        return (lambda Y: np.zeros(Y.shape[:-1])), 0.0
    if kind == "const":
        c = float(arg)
        return (lambda Y: np.full(Y.shape[:-1], c)), abs(c)
    a = float(arg) if arg else 1.0
    if kind == "cos":
        return (lambda Y: np.cos(a * Y.sum(axis=-1))), 1.0
    if kind == "tanh":
        return (lambda Y: np.tanh(a * Y.sum(axis=-1))), 1.0
    if kind == "well":
        return (lambda Y: 1.0 - np.exp(-a * np.sum(Y**2, axis=-1))), 1.0
    raise ValueError(f"unknown state cost {name!r}")


@dataclass
class CostSpec:
    """Projected costs: terminal phi_bar(y), running l0_bar(t, y) with t^eta l0 bounded, and H_min."""

    phi_bar: Callable
    ell0_bar: Callable
    hamiltonian: HamiltonianSpec
    phi_sup: float
    ell0_sup: float
    eta: float = 0.0
    phi_name: str = "custom"
    ell0_name: str = "custom"

    def __post_init__(self):
        if not 0 <= self.eta < 1:
            raise ValueError("eta must lie in [0, 1)")
        if not (np.isfinite(self.phi_sup) and np.isfinite(self.ell0_sup)):
            raise ValueError("costs must be bounded")

    @property
    def ell0_is_zero(self) -> bool:
        return self.ell0_name == "zero"

    @classmethod
    def from_names(cls, phi: str, ell0: str, controls: ControlSet, ell1: str = "zero") -> "CostSpec":
        f, fs = _state_cost_registry(phi)
        g, gs = _state_cost_registry(ell0)
        return cls(f, (lambda t, Y, g=g: g(Y)), HamiltonianSpec(controls, ell1), fs, gs, 0.0, phi, ell0)


# ---------------------------------------------------------------- features

@dataclass
class GaussianFeatureLaw:
    """Features of X(t) started from grid features: mean rows + L w, w ~ N(0, Q), control shift c."""

    mean: np.ndarray
    L: np.ndarray
    t: float
    c: np.ndarray


class ProjectedFeatures:
    """Features = P x in the orthonormal projection basis (needs P to commute with the semigroup)."""

    kind = "projected"

    def __init__(self, model):
        if not hasattr(model, "commutes_with_projection") or not model.commutes_with_projection():
            raise ValueError("projected features need a projection commuting with the semigroup")
        self.model = model
        self.nodes = None

    @property
    def dim(self) -> int:
        return self.model.n_features

    def from_state(self, tau: float, x) -> np.ndarray:
        x = x if isinstance(x, StateVector) else StateVector(as_array(x))
        return self.model.F @ x.coords

    def from_rows(self, tau: float, X: np.ndarray) -> np.ndarray:
        return np.atleast_2d(X) @ self.model.F.T

    def now(self, t: float, Y: np.ndarray) -> GaussianFeatureLaw:
        return GaussianFeatureLaw(Y @ self.model.feature_transition(t).T, self.model.path_map(0.0), t,
                                  self.model.proj_control(t))

    def transition(self, t: float, s: float, Y: np.ndarray) -> GaussianFeatureLaw:
        return self.now(t - s, Y)

    def terminal(self, Y: np.ndarray) -> np.ndarray:
        return Y

    def sd(self, T: float) -> np.ndarray:
        Q = self.model.noise_cov(T)
        return np.sqrt(np.diag(self.model.F @ Q @ self.model.F.T))


class PathFeatures:
    """Samples of the projected trajectory: f_j = P e^{(r_j ^ tau) A} x at knots 0 = r_0 < ... < r_{M-1} = T.

    At time-to-go tau the trajectory r -> P e^{rA} x on [0, tau] is rebuilt by
    linear interpolation through the knots r_j ^ tau; the last feature is
    always P e^{tau A} x, so terminal and running costs read it exactly.
    """

    kind = "path"

    def __init__(self, model, nodes):
        self.model = model
        self.nodes = np.asarray(nodes, dtype=float)
        if self.nodes[0] != 0 or np.any(np.diff(self.nodes) <= 0):
            raise ValueError("path knots must start at 0 and increase")

    @property
    def dim(self) -> int:
        return len(self.nodes) * self.model.n_features

    def _knots(self, tau: float) -> np.ndarray:
        return np.minimum(self.nodes, tau)

    def from_state(self, tau: float, x) -> np.ndarray:
        x = x if isinstance(x, StateVector) else StateVector(as_array(x))
        return np.concatenate([self.model.project(r, x) if r > 0 else x.coords[: self.model.n_features]
                               for r in self._knots(tau)])

    def from_rows(self, tau: float, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.concatenate([self.model.proj_rows(r, X) for r in self._knots(tau)], axis=1)

    def _path_at(self, t: float, Y: np.ndarray, times: np.ndarray) -> np.ndarray:
        """Interpolated trajectory values at ``times`` in [0, t]; Y rows are features at time-to-go t."""
        n = self.model.n_features
        knots = self._knots(t)
        Yk = Y.reshape(len(Y), len(self.nodes), n)
        uk, first = np.unique(knots, return_index=True)
        Yk = Yk[:, first, :]
        out = np.empty((len(Y), len(times), n))
        if len(uk) == 1:
            out[:] = Yk[:, :1, :]
            return out
        idx = np.clip(np.searchsorted(uk, times, side="right") - 1, 0, len(uk) - 2)
        th = np.clip((times - uk[idx]) / (uk[idx + 1] - uk[idx]), 0.0, 1.0)
        out[:] = (1 - th)[None, :, None] * Yk[:, idx, :] + th[None, :, None] * Yk[:, idx + 1, :]
        return out

    def now(self, t: float, Y: np.ndarray) -> GaussianFeatureLaw:
        n = self.model.n_features
        mean = Y.reshape(len(Y), len(self.nodes), n)[:, -1, :]
        return GaussianFeatureLaw(mean, self.model.path_map(0.0), t, self.model.proj_control(t))

    def transition(self, t: float, s: float, Y: np.ndarray) -> GaussianFeatureLaw:
        knots = self._knots(s)
        times = knots + (t - s)
        mean = self._path_at(t, Y, times).reshape(len(Y), -1)
        L = np.vstack([self.model.path_map(r) for r in knots])
        c = np.vstack([self.model.proj_control(r + t - s) for r in knots])
        return GaussianFeatureLaw(mean, L, t - s, c)

    def terminal(self, Y: np.ndarray) -> np.ndarray:
        return Y.reshape(len(Y), len(self.nodes), self.model.n_features)[:, -1, :]

    def sd(self, T: float) -> np.ndarray:
        return np.tile(np.sqrt(np.diag(self.model.noise_cov(T))), len(self.nodes))


def make_features(model, T: float, path_nodes: int = 2):
    if isinstance(model, DelayModel):
        return PathFeatures(model, np.linspace(0.0, T, path_nodes))
    return ProjectedFeatures(model)


# ---------------------------------------------------------------- value field

def _multilinear(axes, table: np.ndarray, pts: np.ndarray):
    """Multilinear interpolation with clamping; returns (values, number of clamped points).

    ``table`` has shape grid_shape + trailing; ``pts`` has shape (..., d).
    """
    d = len(axes)
    lead = pts.shape[:-1]
    P = pts.reshape(-1, d)
    trailing = table.shape[d:]
    if d == 1 and len(axes[0]) > 1:
        ax = axes[0]
        x = P[:, 0]
        n_out = int(np.count_nonzero((x < ax[0]) | (x > ax[-1])))
        flat = table.reshape(len(ax), -1)
        res = np.stack([np.interp(x, ax, flat[:, j]) for j in range(flat.shape[1])], axis=-1)
        return res.reshape(lead + trailing), n_out
    if d >= 2 and all(len(a) > 1 for a in axes):
        return _multilinear_flat(axes, table, P, lead, trailing)
    clamped = np.zeros(len(P), dtype=bool)
    idx, frac = [], []
    for k, ax in enumerate(axes):
        x = P[:, k]
        lo, hi = ax[0], ax[-1]
        out = (x < lo) | (x > hi)
        clamped |= out
        x = np.clip(x, lo, hi)
        if len(ax) == 1:
            idx.append(np.zeros(len(x), dtype=int))
            frac.append(np.zeros(len(x)))
            continue
        i = np.clip(np.searchsorted(ax, x, side="right") - 1, 0, len(ax) - 2)
        idx.append(i)
        frac.append((x - ax[i]) / (ax[i + 1] - ax[i]))
    res = np.zeros((len(P),) + trailing)
    for corner in itertools.product((0, 1), repeat=d):
        wgt = np.ones(len(P))
        ii = []
        for k, c in enumerate(corner):
            if len(axes[k]) == 1:
                if c == 1:
                    wgt = wgt * 0.0
                ii.append(idx[k])
                continue
            wgt = wgt * (frac[k] if c else 1.0 - frac[k])
            ii.append(idx[k] + c)
        if not np.any(wgt):
            continue
        vals = table[tuple(ii)]
        res += wgt.reshape((-1,) + (1,) * len(trailing)) * vals
    return res.reshape(lead + trailing), int(clamped.sum())


def _multilinear_flat(axes, table, P, lead, trailing):
    d = len(axes)
    shape = tuple(len(a) for a in axes)
    strides = np.cumprod((1,) + shape[:0:-1])[::-1]
    flat = table.reshape(int(np.prod(shape)), -1)
    base = np.zeros(len(P), dtype=np.intp)
    fracs = np.empty((d, len(P)))
    clamped = np.zeros(len(P), dtype=bool)
    for k, ax in enumerate(axes):
        x = P[:, k]
        clamped |= (x < ax[0]) | (x > ax[-1])
        x = np.clip(x, ax[0], ax[-1])
        i = np.clip(np.searchsorted(ax, x, side="right") - 1, 0, len(ax) - 2)
        fracs[k] = (x - ax[i]) / (ax[i + 1] - ax[i])
        base += i * strides[k]
    res = np.zeros((len(P), flat.shape[1]))
    for corner in itertools.product((0, 1), repeat=d):
        wgt = np.prod([fracs[k] if c else 1.0 - fracs[k] for k, c in enumerate(corner)], axis=0)
        off = int(sum(c * strides[k] for k, c in enumerate(corner)))
        res += wgt[:, None] * flat[base + off]
    return res.reshape(lead + trailing), int(clamped.sum())


@dataclass
class ValueField:
    """w(tau, features) and grad^C w on time nodes 0 = tau_0 < ... < tau_L = T (tau = time to go)."""

    times: np.ndarray
    axes: tuple
    values: np.ndarray
    grads: np.ndarray
    gamma: float
    feature_kind: str
    feature_nodes: np.ndarray | None = None
    C_T: float = float("nan")
    meta: dict = field(default_factory=dict)
    out_of_box: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        self.values = np.asarray(self.values, dtype=float)
        self.grads = np.asarray(self.grads, dtype=float)
        shape = tuple(len(a) for a in self.axes)
        if self.values.shape != (len(self.times),) + shape:
            raise ValueError("value array does not match the grid")
        if self.grads.shape[: 1 + len(shape)] != (len(self.times),) + shape:
            raise ValueError("gradient array does not match the grid")
        if not (np.all(np.isfinite(self.values)) and np.all(np.isfinite(self.grads))):
            raise ValueError("non-finite value field")

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def m(self) -> int:
        return self.grads.shape[-1]

    @property
    def grid_points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def copy(self) -> "ValueField":
        return ValueField(self.times.copy(), self.axes, self.values.copy(), self.grads.copy(), self.gamma,
                          self.feature_kind, self.feature_nodes, self.C_T, dict(self.meta))

    def _bracket(self, s: float):
        i = int(np.clip(np.searchsorted(self.times, s, side="right") - 1, 0, len(self.times) - 2))
        th = (s - self.times[i]) / (self.times[i + 1] - self.times[i])
        return i, float(np.clip(th, 0.0, 1.0))

    def value_at(self, s: float, pts: np.ndarray) -> np.ndarray:
        i, th = self._bracket(s)
        v0, n0 = _multilinear(self.axes, self.values[i], pts)
        if th == 0.0:
            self.out_of_box += n0
            return v0
        v1, n1 = _multilinear(self.axes, self.values[i + 1], pts)
        self.out_of_box += max(n0, n1)
        return (1 - th) * v0 + th * v1

    def grad_at(self, s: float, pts: np.ndarray) -> np.ndarray:
        """grad^C w(s, .); interpolates tau^gamma grad linearly in time, constant before tau_1."""
        g = self.gamma
        if s <= self.times[1]:
            out, n = _multilinear(self.axes, self.grads[1], pts)
            self.out_of_box += n
            return out
        i, th = self._bracket(s)
        g0, n0 = _multilinear(self.axes, self.grads[i], pts)
        if th == 0.0:
            self.out_of_box += n0
            return g0
        g1, n1 = _multilinear(self.axes, self.grads[i + 1], pts)
        self.out_of_box += max(n0, n1)
        w0 = (self.times[i] / s) ** g * (1 - th)
        w1 = (self.times[i + 1] / s) ** g * th
        return w0 * g0 + w1 * g1

    def to_dict(self) -> dict:
        return {
            "format": "hjbs-value-field",
            "version": FIELD_FORMAT_VERSION,
            "times": self.times.tolist(),
            "axes": [a.tolist() for a in self.axes],
            "values": self.values.tolist(),
            "grads": self.grads.tolist(),
            "gamma": self.gamma,
            "feature_kind": self.feature_kind,
            "feature_nodes": None if self.feature_nodes is None else np.asarray(self.feature_nodes).tolist(),
            "C_T": self.C_T,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ValueField":
        if d.get("format") != "hjbs-value-field" or d.get("version") != FIELD_FORMAT_VERSION:
            raise ValueError("not a value-field document")
        return cls(d["times"], tuple(d["axes"]), d["values"], d["grads"], d["gamma"], d["feature_kind"],
                   None if d["feature_nodes"] is None else np.asarray(d["feature_nodes"]), d["C_T"],
                   d.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ValueField":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def features_for(field: ValueField, model):
    if field.feature_kind == "path":
        return PathFeatures(model, field.feature_nodes)
    return ProjectedFeatures(model)


def evaluate_value(w: ValueField, t: float, x_bar, model, features=None) -> dict:
    """Value and C-gradient of v(t, x_bar) = w(T - t, features of x_bar)."""
    if not -1e-12 <= t <= w.T + 1e-12:
        raise ValueError("t outside [0, T]")
    fs = features or features_for(w, model)
    tau = max(w.T - t, 0.0)
    y = fs.from_state(tau, x_bar)[None, :]
    before = w.out_of_box
    val = float(w.value_at(tau, y)[0])
    grad = w.grad_at(tau, y)[0] if tau > 0 else np.full(w.m, np.nan)
    return {"value": val, "c_gradient": grad, "clamped": w.out_of_box > before}


# ---------------------------------------------------------------- contraction constants

def contraction_factor(L: float, gamma: float, kappa: float, T: float) -> float:
    return float(L * kappa * (beta_fn(1 - gamma, 1 - gamma) + 1.0 / (1 - gamma)) * T ** (1 - gamma))


def check_contraction_horizon(L: float, gamma: float, kappa: float, T: float) -> dict:
    """factor = L kappa (B(1-gamma, 1-gamma) + 1/(1-gamma)) T^{1-gamma}; ok iff factor <= 1/2."""
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    f = contraction_factor(L, gamma, kappa, T)
    c = L * kappa * (beta_fn(1 - gamma, 1 - gamma) + 1.0 / (1 - gamma))
    t_star = float("inf") if c == 0 else (0.5 / c) ** (1.0 / (1 - gamma))
    return {"factor": f, "ok": bool(f <= 0.5), "T_star": t_star}


def weighted_factor(L: float, gamma: float, kappa: float, T: float, mu: float) -> float:
    """Contraction factor in the norm sup e^{mu t}(|w| + t^gamma |grad w|), mu <= 0."""
    if L == 0:
        return 0.0

    def at(t):
        a = quad(lambda s: np.exp(mu * (t - s)), 0, t, weight="alg", wvar=(-gamma, 0))[0]
        b = quad(lambda s: np.exp(mu * (t - s)), 0, t, weight="alg", wvar=(-gamma, -gamma))[0]
        return a + t**gamma * b

    ts = T * np.linspace(0.05, 1.0, 40)
    return float(L * kappa * max(at(t) for t in ts))


def choose_mu(L: float, gamma: float, kappa: float, T: float) -> float:
    """Largest mu <= 0 with weighted factor <= 1/2."""
    if weighted_factor(L, gamma, kappa, T, 0.0) <= 0.5:
        return 0.0
    lo = -1.0
    while weighted_factor(L, gamma, kappa, T, lo) > 0.5:
        lo *= 2.0
        if lo < -1e8:
            raise ValueError("no exponential weight reaches a contraction")
    return float(brentq(lambda m: weighted_factor(L, gamma, kappa, T, m) - 0.5 + 1e-9, lo, 0.0, xtol=1e-10))


def smoothing_constants(model, T: float, n: int = 25, cutoff: float = DEFAULT_CUTOFF):
    """(gamma, kappa) with ||Lambda(t)|| <= kappa (t^{-gamma} v 1) on a log grid of (0, T].

    gamma is the log-log slope over t <= 0.1 T; kappa is the smallest constant
    making the bound hold at every grid point.
    """
    ts = T * np.logspace(-3, 0, n)
    norms = np.array([lambda_base(model, t, cutoff).report.operator_norm for t in ts])
    use = ts <= 0.1 * T
    fit = fit_exponent(ts[use], norms[use])
    gamma = float(np.clip(fit.gamma, 0.0, 0.99))
    kappa = float(np.max(norms / np.maximum(ts ** (-gamma), 1.0)))
    return gamma, kappa


def a_priori_constant(gamma: float, kappa: float, T: float, mu: float, eta: float = 0.0) -> float:
    """C_T with sup|v| <= C_T (sup|phi| + sup|t^eta l0| + |min l1|).

    From the fixed-point estimate ||w|| <= ||Gamma(0)|| / (1 - 1/2) in the
    exponentially weighted norm with the given mu (factor <= 1/2), unweighted
    through e^{|mu| T}.
    """
    a1 = 1.0 + kappa * max(1.0, T**gamma)
    a2 = T ** (1 - eta) / (1 - eta) + kappa * T**gamma * (
        beta_fn(1 - eta, 1 - gamma) * T ** (1 - eta - gamma) + T ** (1 - eta) / (1 - eta))
    return float(2.0 * np.exp(abs(mu) * T) * max(a1, a2))


# ---------------------------------------------------------------- the map Gamma

@dataclass
class SolverConfig:
    T: float = 1.0
    n_nodes: int = 20
    tol: float = 1e-3
    max_iter: int = 30
    n_mc: int = 2000
    n_time: int = 8
    grid_per_dim: int = 41
    window_policy: str = "split"
    mu: float | None = None
    gamma: float | None = None
    kappa: float | None = None
    halfwidth_sd: float = 5.0
    halfwidth: float | None = None
    path_nodes: int = 2
    cutoff: float = DEFAULT_CUTOFF
    antithetic: bool = True
    seed: int = 0
    threads: int = 1


class GammaMap:
    """Evaluates Gamma(w) at (tau, feature points) with draws fixed by (seed, keys)."""

    def __init__(self, model, costs: CostSpec, features, cfg: SolverConfig):
        self.model = model
        self.costs = costs
        self.fs = features
        self.cfg = cfg
        self._lam_cache: dict = {}
        self._sqrt_cache: dict = {}

    def _noise(self, t: float, keys) -> np.ndarray:
        key = float(t)
        if key not in self._sqrt_cache:
            self._sqrt_cache[key] = GaussianMeasure(np.zeros(self.model.n_noise), self.model.noise_cov(t)).sqrt_factor
        S = self._sqrt_cache[key]
        n = self.cfg.n_mc
        if self.cfg.antithetic:
            xi = rng.standard_normal(self.cfg.seed, ((n + 1) // 2, S.shape[1]), *keys)
            xi = np.concatenate([xi, -xi])[:n]
        else:
            xi = rng.standard_normal(self.cfg.seed, (n, S.shape[1]), *keys)
        return xi @ S.T

    def _scores(self, law: GaussianFeatureLaw, Z: np.ndarray) -> np.ndarray:
        key = (law.L.tobytes(), float(law.t), law.c.tobytes())
        lam = self._lam_cache.get(key)
        if lam is None:
            S = self._sqrt_cache.get(float(law.t))
            if S is None:
                S = GaussianMeasure(np.zeros(self.model.n_noise), self.model.noise_cov(law.t)).sqrt_factor
            fac = PsdFactor.from_factor(law.L @ S, self.cfg.cutoff)
            res = fac.range_residual(law.c) if np.any(law.c) else 0.0
            if res > INCLUSION_TOL:
                raise InclusionError(LambdaReport("hjb", law.t, 0.0, res, fac.rank))
            lam = (fac, fac.whiten(law.c))
            if len(self._lam_cache) < 100000:
                self._lam_cache[key] = lam
        fac, mat = lam
        return ((Z @ fac.vecs) / np.sqrt(fac.vals)) @ mat

    def _average(self, vals: np.ndarray, scores: np.ndarray):
        n = vals.shape[1]
        return vals.mean(axis=1), vals @ scores / n

    def evaluate(self, w: ValueField, tau: float, Y: np.ndarray, keys, start: float = 0.0,
                 include_hamiltonian: bool = True, include_running: bool = True):
        """Gamma(w)(tau, Y) for feature rows Y; returns (values (n,), grads (n, m))."""
        costs, fs = self.costs, self.fs
        m = self.model.n_controls
        # initial datum: phi at tau = 0, or w(start) inside a later window
        if start == 0.0:
            law = fs.now(tau, Y)
            W = self._noise(tau, tuple(keys) + ("init",))
            Z = W @ law.L.T
            vals = costs.phi_bar(law.mean[:, None, :] + Z[None, :, :])
        else:
            law = fs.transition(tau, start, Y)
            W = self._noise(tau - start, tuple(keys) + ("init",))
            Z = W @ law.L.T
            vals = w.value_at(start, law.mean[:, None, :] + Z[None, :, :])
        value, grad = self._average(vals, self._scores(law, Z))
        if not (include_hamiltonian or include_running) or tau <= start:
            return value, grad
        rule = QuadratureRule.graded(start, tau, self.cfg.n_time)
        for q, (s, wq) in enumerate(zip(rule.nodes, rule.weights)):
            dt = tau - s
            W = self._noise(dt, tuple(keys) + ("conv", q))
            h_val = np.zeros((len(Y), len(W)))
            if include_running and not costs.ell0_is_zero:
                law0 = fs.now(dt, Y)
                Z0 = W @ law0.L.T
                r = costs.ell0_bar(w.T - s, law0.mean[:, None, :] + Z0[None, :, :])
                v, g = self._average(r, self._scores(law0, Z0))
                value = value + wq * v
                grad = grad + wq * g
            if include_hamiltonian:
                lawh = fs.transition(tau, s, Y)
                Zh = W @ lawh.L.T
                if include_hamiltonian == "zero":
                    h_val = np.full((len(Y), len(W)), costs.hamiltonian.h_zero)
                else:
                    p = w.grad_at(s, lawh.mean[:, None, :] + Zh[None, :, :])
                    h_val = costs.hamiltonian.h_min(p)
                v, g = self._average(h_val, self._scores(lawh, Zh))
                value = value + wq * v
                grad = grad + wq * g
        return value, grad.reshape(len(Y), m)


def _chunks(n: int, size: int):
    return [(i, min(n, i + size)) for i in range(0, n, size)]


def _eval_nodes(gmap: GammaMap, w: ValueField, node_ids, start: float, window: int, hamiltonian: bool,
                running: bool, threads: int):
    pts = w.grid_points
    size = max(1, 4_000_000 // max(1, gmap.cfg.n_mc * max(1, pts.shape[1])))
    jobs = [(i, a, b) for i in node_ids for a, b in _chunks(len(pts), size)]

    def run(job):
        i, a, b = job
        return gmap.evaluate(w, w.times[i], pts[a:b], ("gamma", window, i, a), start, hamiltonian, running)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    shape = w.values.shape[1:]
    out_v = {i: np.empty(len(pts)) for i in node_ids}
    out_g = {i: np.empty((len(pts), w.m)) for i in node_ids}
    for (i, a, b), (v, g) in zip(jobs, results):
        out_v[i][a:b] = v
        out_g[i][a:b] = g
    return {i: (out_v[i].reshape(shape), out_g[i].reshape(shape + (w.m,))) for i in node_ids}


def picard_step(w: ValueField, model, costs: CostSpec, cfg: SolverConfig, features=None,
                node_ids=None, start_index: int = 0, window: int = 0) -> ValueField:
    """Gamma(w) on the given time nodes (default: all tau > 0); other nodes are copied."""
    fs = features or features_for(w, model)
    gmap = GammaMap(model, costs, fs, cfg)
    ids = list(node_ids) if node_ids is not None else list(range(1, len(w.times)))
    new = w.copy()
    res = _eval_nodes(gmap, w, ids, float(w.times[start_index]), window, True, True, cfg.threads)
    for i, (v, g) in res.items():
        new.values[i] = v
        new.grads[i] = g
    new.out_of_box = w.out_of_box
    return new


def weighted_norm(a: ValueField, b: ValueField, node_ids, gamma: float, mu: float, start: float = 0.0) -> float:
    """max over nodes of e^{mu tau}|dv| plus max of e^{mu tau}(tau - start)^gamma |dgrad|."""
    dv, dg = 0.0, 0.0
    for i in node_ids:
        tau = a.times[i]
        wgt = np.exp(mu * tau)
        dv = max(dv, wgt * float(np.max(np.abs(a.values[i] - b.values[i]))))
        dg = max(dg, wgt * (tau - start) ** gamma * float(np.max(np.abs(a.grads[i] - b.grads[i]))))
    return dv + dg


def _feature_axes(fs, cfg: SolverConfig):
    sd = fs.sd(cfg.T)
    half = np.full(fs.dim, cfg.halfwidth) if cfg.halfwidth is not None else cfg.halfwidth_sd * sd
    return tuple(np.linspace(-h, h, cfg.grid_per_dim) for h in half)


@dataclass
class ConvergenceReport:
    converged: bool
    iterations: int
    iterate_norms: list
    ratios: list
    windows: list
    gamma: float
    kappa: float
    L: float
    factor: float
    T_star: float
    mu: float
    policy: str
    C_T: float
    window_overlap_max: float
    out_of_box: int
    residual: float | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _window_bounds(n_nodes: int, T: float, t_star: float, policy: str):
    """Index windows [a, b] of the time grid; consecutive split windows overlap by half."""
    if policy == "weighted" or T <= t_star:
        return [(0, n_nodes)]
    dtau = T / n_nodes
    k = int(np.floor(t_star / (2 * dtau) + 1e-9))
    if k < 1:
        raise ValueError("time grid too coarse for the admissible window; increase n_nodes")
    wins, a = [], 0
    while True:
        b = min(a + 2 * k, n_nodes)
        wins.append((a, b))
        if b == n_nodes:
            return wins
        a += k


def initial_field(model, costs: CostSpec, cfg: SolverConfig, features=None, gamma: float = 0.5) -> ValueField:
    fs = features or make_features(model, cfg.T, cfg.path_nodes)
    axes = _feature_axes(fs, cfg)
    times = np.linspace(0.0, cfg.T, cfg.n_nodes + 1)
    shape = tuple(len(a) for a in axes)
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    values = np.zeros((len(times),) + shape)
    values[0] = costs.phi_bar(fs.terminal(pts)).reshape(shape)
    grads = np.zeros((len(times),) + shape + (model.n_controls,))
    return ValueField(times, axes, values, grads, gamma, fs.kind, fs.nodes)


def solve_hjb(model, costs: CostSpec, cfg: SolverConfig, features=None, raise_on_failure: bool = True):
    """Picard iteration from the affine part w_0 = R_tau[phi] + int_0^tau R_{tau-s}[l0 + H_min(0)] ds.

    In later windows R_tau[phi] is replaced by R_{tau-a}[w(a)].

    Returns (ValueField, ConvergenceReport).  Windows of length <= T_star
    overlapping by half are chained when T exceeds the admissible horizon and
    the policy is ``split``; with ``weighted`` the whole horizon is one window
    and iterate differences are measured in the exponentially weighted norm.
    """
    t0 = time.perf_counter()
    fs = features or make_features(model, cfg.T, cfg.path_nodes)
    if isinstance(fs, PathFeatures) and cfg.T >= model.eps_delay:
        raise ValueError("path-feature solves need T < eps_delay")
    if cfg.gamma is not None and cfg.kappa is not None:
        gamma, kappa = cfg.gamma, cfg.kappa
    else:
        g_est, k_est = smoothing_constants(model, cfg.T, cutoff=cfg.cutoff)
        gamma = cfg.gamma if cfg.gamma is not None else g_est
        kappa = cfg.kappa if cfg.kappa is not None else k_est
    L = costs.hamiltonian.lipschitz_L
    chk = check_contraction_horizon(L, gamma, kappa, cfg.T)
    if cfg.window_policy not in ("split", "weighted"):
        raise ValueError("window_policy must be split or weighted")
    mu_bound = choose_mu(L, gamma, kappa, cfg.T)
    mu = (cfg.mu if cfg.mu is not None else mu_bound) if cfg.window_policy == "weighted" else 0.0
    C_T = a_priori_constant(gamma, kappa, cfg.T, mu_bound, costs.eta)
    scale = costs.phi_sup + costs.ell0_sup
    if scale > 0:
        C_T *= 1.0 + abs(costs.hamiltonian.h_zero) / scale

    w = initial_field(model, costs, cfg, fs, gamma)
    w.C_T = C_T
    gmap = GammaMap(model, costs, fs, cfg)
    windows = _window_bounds(cfg.n_nodes, cfg.T, chk["T_star"], cfg.window_policy)
    norms_all, ratios_all, win_reports = [], [], []
    converged_all, iters_total, overlap_max = True, 0, 0.0
    previous = None
    for k, (a, b) in enumerate(windows):
        ids = list(range(a + 1, b + 1))
        start = float(w.times[a])
        # w_0: the affine part of Gamma, i.e. Gamma evaluated with a zero gradient
        res = _eval_nodes(gmap, w, ids, start, k, "zero", True, cfg.threads)
        for i, (v, g) in res.items():
            w.values[i] = v
            w.grads[i] = g
        norms, plain, ratios, converged, bad = [], [], [], False, 0
        for it in range(cfg.max_iter):
            res = _eval_nodes(gmap, w, ids, start, k, True, True, cfg.threads)
            new = w.copy()
            for i, (v, g) in res.items():
                new.values[i] = v
                new.grads[i] = g
            d = weighted_norm(new, w, ids, gamma, mu, start)
            d_plain = weighted_norm(new, w, ids, gamma, 0.0, start)
            norms.append(d)
            plain.append(d_plain)
            if len(norms) > 1 and norms[-2] > 0:
                ratios.append(d / norms[-2])
                bad = bad + 1 if ratios[-1] > 1.0 else 0
            new.out_of_box = w.out_of_box
            w = new
            iters_total += 1
            # the weighted norm can hide large late-time changes; stop on the plain one
            if d_plain <= cfg.tol:
                converged = True
                break
            if bad >= 3:
                rep = _report(False, iters_total, norms_all + norms, ratios_all + ratios, win_reports, gamma,
                              kappa, L, chk, mu, cfg, C_T, overlap_max, w, t0)
                raise ContractionError("successive differences grew for 3 consecutive iterations", w, rep)
        if previous is not None:
            overlap = [i for i in ids if i <= previous[1]]
            for i in overlap:
                overlap_max = max(overlap_max, float(np.max(np.abs(previous[2][i] - w.values[i]))))
        previous = (a, b, {i: w.values[i].copy() for i in ids})
        win_reports.append({"start": float(w.times[a]), "end": float(w.times[b]), "iterations": len(norms),
                            "converged": converged, "norms": norms, "plain_norms": plain})
        norms_all += norms
        ratios_all += ratios
        converged_all = converged_all and converged
    w.meta = {"policy": cfg.window_policy, "mu": mu, "kappa": kappa, "L": L, "T_star": chk["T_star"],
              "seed": cfg.seed}
    rep = _report(converged_all, iters_total, norms_all, ratios_all, win_reports, gamma, kappa, L, chk, mu, cfg,
                  C_T, overlap_max, w, t0)
    if raise_on_failure and not converged_all:
        raise HJBConvergenceError(f"no convergence within max_iter={cfg.max_iter}", w, rep)
    return w, rep


def _report(converged, iters, norms, ratios, wins, gamma, kappa, L, chk, mu, cfg, C_T, overlap, w, t0):
    return ConvergenceReport(converged, iters, [float(x) for x in norms], [float(x) for x in ratios], wins,
                             float(gamma), float(kappa), float(L), float(chk["factor"]), float(chk["T_star"]),
                             float(mu), cfg.window_policy, float(C_T), float(overlap), int(w.out_of_box),
                             wall_time=time.perf_counter() - t0)


def mild_residual(w: ValueField, model, costs: CostSpec, probes, cfg: SolverConfig, features=None) -> float:
    """max over probes (t, x_bar) of |v(t, x) - Gamma(w)(T - t, x)|.

    Probes whose time sits on a stored node reuse that node's draws, so with
    the solver's seed a converged field reproduces its own fixed point.
    """
    fs = features or features_for(w, model)
    gmap = GammaMap(model, costs, fs, cfg)
    worst = 0.0
    for j, (t, x) in enumerate(probes):
        tau = w.T - t
        y = fs.from_state(tau, x)[None, :]
        lhs = float(w.value_at(tau, y)[0])
        if tau <= 0:
            rhs = float(costs.phi_bar(fs.terminal(y))[0])
        else:
            hit = np.flatnonzero(np.isclose(w.times, tau, rtol=0, atol=1e-12))
            keys = ("gamma", 0, int(hit[0]), 0) if len(hit) else ("residual", j)
            rhs = float(gmap.evaluate(w, tau, y, keys)[0][0])
        worst = max(worst, abs(lhs - rhs))
    return worst
