"""Concrete models and trajectory-lift operators.

Two model classes share one small interface used by the smoothing, HJB and
simulation code:

* ``dim``, ``n_noise``, ``n_controls``, ``n_features``
* ``semigroup(t, X)`` / ``semigroup_adjoint(t, Z)`` on row stacks
* ``noise_cov(t)`` -- covariance of the stochastic convolution in noise coordinates
* ``embed_noise(W)`` -- noise coordinates to state coordinates
* ``project(t, x_bar)`` -- P e^{tA} x_bar for a StateVector (extended states allowed for t > 0)
* ``proj_rows(t, X)`` -- P e^{tA} on row stacks of ordinary states
* ``path_map(r)`` -- P e^{rA} composed with ``embed_noise``
* ``proj_control(t)`` -- P e^{tA} C as an (n_features, n_controls) matrix
* ``control_increment(dt, U)`` -- state increment of a control held over one step

``MatrixModel`` covers finite-dimensional OU systems (the scalar benchmark and
the spectrally truncated heat equation); ``DelayModel`` is the product-space
lift of a delay-in-control SDE with the lag variable on a uniform cell grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import expm

from .ou_core import QuadratureRule, StateVector, as_array

MODEL_FORMAT_VERSION = 1


def _orthonormal_rows(vectors: np.ndarray) -> np.ndarray:
    """Gram-Schmidt (via QR) on the rows; raises on linear dependence."""
    V = np.atleast_2d(np.asarray(vectors, dtype=float))
    Q, R = np.linalg.qr(V.T)
    if np.any(np.abs(np.diag(R)) < 1e-12 * max(1.0, np.abs(R).max())):
        raise ValueError("projection vectors are linearly dependent")
    Q = Q * np.sign(np.diag(R))
    return Q.T


class MatrixModel:
    """dX = (A X + C u) dt + G dW on R^N with projection onto span of the rows of F."""

    kind = "matrix"

    def __init__(self, A, G, C, F=None, name: str = "matrix"):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        N = self.A.shape[0]
        self.G = np.asarray(G, dtype=float).reshape(N, -1)
        self.C = np.asarray(C, dtype=float).reshape(N, -1)
        self.F = np.eye(N) if F is None else _orthonormal_rows(F)
        self.name = name
        if self.A.shape != (N, N) or self.F.shape[1] != N:
            raise ValueError("inconsistent model matrices")
        for m in (self.A, self.G, self.C):
            if not np.all(np.isfinite(m)):
                raise ValueError("non-finite model matrix")
        off = self.A - np.diag(np.diag(self.A))
        self.diagonal = bool(np.all(off == 0.0))
        self._expm = lru_cache(maxsize=4096)(self._expm_uncached)

    # sizes
    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def n_noise(self) -> int:
        return self.dim

    @property
    def n_controls(self) -> int:
        return self.C.shape[1]

    @property
    def n_features(self) -> int:
        return self.F.shape[0]

    def inner(self, x, y) -> np.ndarray:
        return np.sum(as_array(x) * as_array(y), axis=-1)

    def _expm_uncached(self, t: float) -> np.ndarray:
        if self.diagonal:
            return np.diag(np.exp(t * np.diag(self.A)))
        return expm(t * self.A)

    def etA(self, t: float) -> np.ndarray:
        return self._expm(float(t))

    def semigroup(self, t: float, X: np.ndarray) -> np.ndarray:
        return X @ self.etA(t).T

    def semigroup_adjoint(self, t: float, Z: np.ndarray) -> np.ndarray:
        return Z @ self.etA(t)

    def semigroup_bar(self, t: float, x: StateVector) -> StateVector:
        return StateVector(self.etA(t) @ x.coords, x.space)

    def noise_cov(self, t: float, rule: QuadratureRule | None = None) -> np.ndarray:
        GG = self.G @ self.G.T
        if rule is None and self.diagonal:
            a = np.diag(self.A)
            s = a[:, None] + a[None, :]
            with np.errstate(divide="ignore", invalid="ignore"):
                fac = np.where(np.abs(s * t) > 1e-12, np.expm1(s * t) / np.where(s == 0, 1.0, s), t * (1 + 0.5 * s * t))
            return GG * fac
        rule = rule or QuadratureRule.gauss_legendre(0.0, t, 64)
        Q = np.zeros_like(GG)
        for s, w in zip(rule.nodes, rule.weights):
            E = self.etA(s)
            Q += w * (E @ GG @ E.T)
        return 0.5 * (Q + Q.T)

    def embed_noise(self, W: np.ndarray) -> np.ndarray:
        return np.asarray(W, dtype=float)

    def project(self, t: float, x: StateVector) -> np.ndarray:
        if x.space == "H_bar" and t <= 0:
            raise ValueError("projected semigroup on extended states needs t > 0")
        return self.F @ (self.etA(t) @ x.coords)

    def proj_rows(self, t: float, X: np.ndarray) -> np.ndarray:
        return X @ (self.F @ self.etA(t)).T

    def proj_adjoint(self, t: float, Z: np.ndarray) -> np.ndarray:
        return Z @ (self.F @ self.etA(t))

    def path_map(self, r: float) -> np.ndarray:
        return self.F @ self.etA(r)

    def proj_control(self, t: float) -> np.ndarray:
        return self.F @ self.etA(t) @ self.C

    def control_state(self, u) -> StateVector:
        return StateVector(self.C @ np.atleast_1d(np.asarray(u, dtype=float)), "H_bar")

    def control_increment(self, dt: float, U: np.ndarray) -> np.ndarray:
        """Rows of int_0^dt e^{rA} dr C u."""
        if self.diagonal:
            a = np.diag(self.A)
            with np.errstate(divide="ignore", invalid="ignore"):
                phi = np.where(np.abs(a * dt) > 1e-12, np.expm1(a * dt) / np.where(a == 0, 1.0, a), dt)
            K = phi[:, None] * self.C
        else:
            N = self.dim
            blk = np.zeros((2 * N, 2 * N))
            blk[:N, :N] = self.A
            blk[:N, N:] = np.eye(N)
            K = expm(dt * blk)[:N, N:] @ self.C
        return np.atleast_2d(U) @ K.T

    def commutes_with_projection(self, t: float = 0.37) -> bool:
        E = self.etA(t)
        lhs = self.F @ E
        rhs = (self.F @ E @ self.F.T) @ self.F
        return bool(np.abs(lhs - rhs).max() <= 1e-10 * max(1.0, np.abs(lhs).max()))

    def feature_transition(self, t: float) -> np.ndarray:
        """F e^{tA} F^T, the exact feature propagator when P commutes with the semigroup."""
        return self.F @ self.etA(t) @ self.F.T

    def to_dict(self) -> dict:
        return {
            "format": "hjbs-model",
            "version": MODEL_FORMAT_VERSION,
            "kind": self.kind,
            "name": self.name,
            "A": self.A.tolist(),
            "G": self.G.tolist(),
            "C": self.C.tolist(),
            "F": self.F.tolist(),
        }


def scalar_model(a: float = -1.0, g: float = 1.0, c: float = 1.0) -> MatrixModel:
    return MatrixModel([[a]], [[g]], [[c]], [[1.0]], name="scalar")


@dataclass(frozen=True)
class HeatConfig:
    n_modes: int = 20
    beta: float = 1.0
    eps: float = 0.1
    eta: float = 1.0
    p_vectors: tuple = ((1.0,),)
    inputs: str = "both"


class HeatModel(MatrixModel):
    """Heat equation on [0, pi], Dirichlet boundary control, truncated to N sine modes.

    lambda_n = n^2, e_n = sqrt(2/pi) sin(n x), noise covariance (-A)^{-beta}.
    Control columns are the coefficients of (-A) D u where D is the linear
    (harmonic) extension of the boundary values.
    """

    kind = "heat"

    def __init__(self, cfg: HeatConfig):
        N = int(cfg.n_modes)
        if N < 1:
            raise ValueError("n_modes must be >= 1")
        if not cfg.beta > 0:
            raise ValueError("beta must be positive")
        if not 0 < cfg.eps < 0.25:
            raise ValueError("eps must lie in (0, 1/4)")
        if not cfg.eta > 0.25 + cfg.eps:
            raise ValueError("eta must exceed 1/4 + eps")
        n = np.arange(1, N + 1, dtype=float)
        lam = n**2
        coeff_left = n * np.sqrt(2 / np.pi)
        coeff_right = n * np.sqrt(2 / np.pi) * (-1.0) ** (n + 1)
        cols = {"both": [coeff_left, coeff_right], "left": [coeff_left], "right": [coeff_right]}
        if cfg.inputs not in cols:
            raise ValueError(f"unknown boundary inputs {cfg.inputs!r}")
        C = np.column_stack(cols[cfg.inputs])
        P = np.zeros((len(cfg.p_vectors), N))
        for i, v in enumerate(cfg.p_vectors):
            v = np.asarray(v, dtype=float)
            if len(v) > N:
                raise ValueError("projection vector longer than the number of modes")
            P[i, : len(v)] = v
        F = _orthonormal_rows(P)
        # D((-A)^eta) membership: the truncated weighted norm must not be carried by the last mode.
        wn = (lam[None, :] ** (2 * cfg.eta)) * F**2
        if np.any(wn[:, -1] > 0.1 * wn.sum(axis=1)) and N > 1:
            raise ValueError("projection vectors are not numerically in D((-A)^eta)")
        super().__init__(-np.diag(lam), np.diag(lam ** (-cfg.beta / 2)), C, F, name="heat")
        self.cfg = cfg
        self.eigenvalues = lam

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["config"] = {k: getattr(self.cfg, k) for k in ("n_modes", "beta", "eps", "eta", "inputs")}
        d["config"]["p_vectors"] = [list(v) for v in self.cfg.p_vectors]
        return d


def build_heat_model(cfg: HeatConfig) -> HeatModel:
    return HeatModel(cfg)


@dataclass(frozen=True)
class DelayConfig:
    a0: tuple = ((0.0,),)
    b0: tuple = ((1.0,),)
    sigma: tuple = ((1.0,),)
    d: float = 1.0
    eps_delay: float = 1.0
    atoms: tuple = ((-1.0, 1.0),)
    m_lag: int = 100
    require_invertible_sigma: bool = True


class DelayModel:
    """Lift of dy = a0 y dt + b0 u dt + sum_i w_i u(t + xi_i) dt + sigma dW.

    State (x0, x1) in R^n x L^2([-d, 0]; R^n); x1 is stored as cell averages on
    M_lag uniform cells of width h, so the H inner product is
    x0.z0 + h * sum_j x1_j.z1_j.  Shifts by fractional cells use the exact L^2
    projection, so the discrete semigroup and its adjoint are exact transposes.
    """

    kind = "delay"

    def __init__(self, cfg: DelayConfig):
        self.cfg = cfg
        self.a0 = np.atleast_2d(np.asarray(cfg.a0, dtype=float))
        n = self.a0.shape[0]
        self.b0 = np.asarray(cfg.b0, dtype=float).reshape(n, -1)
        self.sigma = np.asarray(cfg.sigma, dtype=float).reshape(n, -1)
        m = self.b0.shape[1]
        self.d = float(cfg.d)
        self.eps_delay = float(cfg.eps_delay)
        if not self.d > 0:
            raise ValueError("delay horizon d must be positive")
        if not 0 < self.eps_delay <= self.d:
            raise ValueError("eps_delay must lie in (0, d]")
        if cfg.require_invertible_sigma:
            if self.sigma.shape[0] != self.sigma.shape[1] or abs(np.linalg.det(self.sigma)) < 1e-12:
                raise ValueError("sigma must be invertible for the controllability check")
        self.M_lag = int(cfg.m_lag)
        if self.M_lag < 1:
            raise ValueError("m_lag must be >= 1")
        self.h = self.d / self.M_lag
        self.edges = -self.d + self.h * np.arange(self.M_lag + 1)
        lags, weights, snap = [], [], 0.0
        for atom in cfg.atoms:
            lag, w = float(atom[0]), np.asarray(atom[1], dtype=float).reshape(n, m)
            if lag > -self.eps_delay or lag < -self.d:
                raise ValueError(f"atom lag {lag} outside [-d, -eps_delay]")
            j = int(round((lag + self.d) / self.h))
            snapped = self.edges[j]
            snap = max(snap, abs(snapped - lag))
            lags.append(snapped)
            weights.append(w)
        self.atom_lags = np.array(lags, dtype=float)
        self.atom_weights = np.array(weights, dtype=float).reshape(len(lags), n, m)
        self.snap_error = snap
        self.n = n
        self.m = m
        self.name = "delay"
        self._phi_cache: dict = {}

    # sizes
    @property
    def dim(self) -> int:
        return self.n * (1 + self.M_lag)

    @property
    def n_noise(self) -> int:
        return self.n

    @property
    def n_controls(self) -> int:
        return self.m

    @property
    def n_features(self) -> int:
        return self.n

    @property
    def metric(self) -> np.ndarray:
        return np.concatenate([np.ones(self.n), np.full(self.n * self.M_lag, self.h)])

    def inner(self, x, y) -> np.ndarray:
        return np.sum(as_array(x) * as_array(y) * self.metric, axis=-1)

    def split(self, X: np.ndarray):
        X = np.atleast_2d(X)
        return X[:, : self.n], X[:, self.n :].reshape(len(X), self.M_lag, self.n)

    def join(self, x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
        return np.concatenate([x0, x1.reshape(len(x0), -1)], axis=1)

    # exponentials
    def ea(self, t: float) -> np.ndarray:
        return expm(t * self.a0) if np.any(self.a0) else np.eye(self.n)

    def Phi(self, tau) -> np.ndarray:
        """int_0^tau e^{u a0} du for each entry of tau, shape (len(tau), n, n)."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        out = np.empty((len(tau), self.n, self.n))
        if not np.any(self.a0):
            out[:] = tau[:, None, None] * np.eye(self.n)
            return out
        if self.n == 1:
            a = self.a0[0, 0]
            out[:, 0, 0] = np.where(np.abs(a * tau) > 1e-12, np.expm1(a * tau) / a, tau)
            return out
        blk = np.zeros((2 * self.n, 2 * self.n))
        blk[: self.n, : self.n] = self.a0
        blk[: self.n, self.n :] = np.eye(self.n)
        for i, s in enumerate(tau):
            out[i] = expm(s * blk)[: self.n, self.n :]
        return out

    def _cell_kernels(self, t: float) -> np.ndarray:
        """K_j = int over cell_j intersected with [-t, 0] of e^{(t+s)a0} ds, shape (M_lag, n, n)."""
        key = float(t)
        if key in self._phi_cache:
            return self._phi_cache[key]
        lo = np.maximum(self.edges[:-1], -t)
        hi = self.edges[1:]
        active = hi > -t
        K = np.zeros((self.M_lag, self.n, self.n))
        if np.any(active):
            K[active] = self.Phi(t + hi[active]) - self.Phi(t + lo[active])
        if len(self._phi_cache) < 4096:
            self._phi_cache[key] = K
        return K

    def _shift_matrix(self, t: float) -> np.ndarray:
        """Cell-average matrix of x1(. - t) restricted to [-d + t, 0]."""
        key = ("shift", float(t))
        if key not in self._phi_cache:
            self._phi_cache[key] = self._build_shift(t)
        return self._phi_cache[key]

    def _build_shift(self, t: float) -> np.ndarray:
        M = self.M_lag
        S = np.zeros((M, M))
        q = t / self.h
        k = int(np.floor(q + 1e-12))
        f = q - k
        if abs(f) < 1e-12:
            f = 0.0
        for i in range(M):
            j = i - k
            if 0 <= j < M:
                S[i, j] += 1.0 - f
            if f > 0 and 0 <= j - 1 < M:
                S[i, j - 1] += f
        return S

    def semigroup(self, t: float, X: np.ndarray) -> np.ndarray:
        x0, x1 = self.split(X)
        E = self.ea(t)
        K = self._cell_kernels(t)
        y0 = x0 @ E.T + np.einsum("jab,pjb->pa", K, x1)
        y1 = np.einsum("ij,pjb->pib", self._shift_matrix(t), x1)
        return self.join(y0, y1)

    def semigroup_adjoint(self, t: float, Z: np.ndarray) -> np.ndarray:
        z0, z1 = self.split(Z)
        E = self.ea(t)
        K = self._cell_kernels(t)
        y0 = z0 @ E
        y1 = np.einsum("jba,pb->pja", K, z0) / self.h + np.einsum("ji,pjb->pib", self._shift_matrix(t), z1)
        return self.join(y0, y1)

    def semigroup_bar(self, t: float, x: StateVector) -> StateVector:
        """Semigroup on extended states, moving point masses exactly."""
        y = self.semigroup(t, x.coords[None, :])[0]
        if not x.has_atoms:
            return StateVector(y, x.space)
        moved = x.atom_lags + t
        absorbed = moved >= 0
        for lag, mass in zip(x.atom_lags[absorbed], x.atom_masses[absorbed]):
            y[: self.n] += self.ea(t + lag) @ mass
        keep = ~absorbed
        if np.any(keep):
            return StateVector(y, "H_bar", moved[keep], x.atom_masses[keep])
        return StateVector(y, "H_bar")

    def noise_cov(self, t: float, rule: QuadratureRule | None = None) -> np.ndarray:
        SS = self.sigma @ self.sigma.T
        if not np.any(self.a0):
            return t * SS
        rule = rule or QuadratureRule.gauss_legendre(0.0, t, 64)
        Q = np.zeros_like(SS)
        for s, w in zip(rule.nodes, rule.weights):
            E = self.ea(s)
            Q += w * (E @ SS @ E.T)
        return 0.5 * (Q + Q.T)

    def embed_noise(self, W: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(W)
        return np.concatenate([W, np.zeros((len(W), self.n * self.M_lag))], axis=1)

    def etAB_first(self, t: float, u=None) -> np.ndarray:
        """First component of e^{tA} B u; without ``u`` the (n, m) matrix."""
        if not t > 0:
            raise ValueError("etAB_first needs t > 0")
        out = self.ea(t) @ self.b0
        for lag, w in zip(self.atom_lags, self.atom_weights):
            if lag >= -t:
                out = out + self.ea(t + lag) @ w
        return out if u is None else out @ np.atleast_1d(np.asarray(u, dtype=float))

    def project(self, t: float, x: StateVector) -> np.ndarray:
        if x.space == "H_bar" and t <= 0:
            raise ValueError("projected semigroup on extended states needs t > 0")
        return self.semigroup_bar(t, x).coords[: self.n] if t > 0 else x.coords[: self.n].copy()

    def proj_rows(self, t: float, X: np.ndarray) -> np.ndarray:
        x0, x1 = self.split(X)
        return x0 @ self.ea(t).T + np.einsum("jab,pjb->pa", self._cell_kernels(t), x1)

    def proj_adjoint(self, t: float, Z: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(Z)
        y0 = Z @ self.ea(t)
        y1 = np.einsum("jba,pb->pja", self._cell_kernels(t), Z) / self.h
        return self.join(y0, y1)

    def path_map(self, r: float) -> np.ndarray:
        return self.ea(r)

    def proj_control(self, t: float) -> np.ndarray:
        return self.etAB_first(t)

    def control_state(self, u) -> StateVector:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        coords = np.concatenate([self.b0 @ u, np.zeros(self.n * self.M_lag)])
        if len(self.atom_lags) == 0:
            return StateVector(coords, "H_bar")
        masses = np.array([w @ u for w in self.atom_weights])
        return StateVector(coords, "H_bar", self.atom_lags.copy(), masses)

    def control_increment(self, dt: float, U: np.ndarray) -> np.ndarray:
        """Increment of a control held over one step of length dt.

        First block Phi(dt) b0 u; each point mass w_i u entering at lag xi_i
        spreads over [xi_i, xi_i + dt] (assumes dt < eps_delay so nothing is
        absorbed within the step), recorded as cell averages.
        """
        U = np.atleast_2d(U)
        inc0 = U @ (self.Phi(dt)[0] @ self.b0).T
        inc1 = np.zeros((len(U), self.M_lag, self.n))
        for lag, w in zip(self.atom_lags, self.atom_weights):
            lo = np.maximum(self.edges[:-1], lag)
            hi = np.minimum(self.edges[1:], lag + dt)
            frac = np.clip(hi - lo, 0.0, None) / self.h
            inc1 += frac[None, :, None] * (U @ w.T)[:, None, :]
        return self.join(inc0, inc1)

    def history_state(self, y0, u_hist) -> np.ndarray:
        """Lifted state for present value y0 and past controls u_hist(theta), theta in [-d, 0).

        x1(xi) = sum over atoms with xi_i <= xi of w_i u_hist(xi_i - xi), stored as
        cell averages (8-point Gauss-Legendre per cell).
        """
        x1 = np.zeros((self.M_lag, self.n))
        g, gw = np.polynomial.legendre.leggauss(8)
        for j in range(self.M_lag):
            xs = self.edges[j] + 0.5 * self.h * (g + 1.0)
            acc = np.zeros(self.n)
            for lag, w in zip(self.atom_lags, self.atom_weights):
                mask = lag <= xs
                if not np.any(mask):
                    continue
                vals = np.array([w @ np.atleast_1d(u_hist(lag - x)) if mk else np.zeros(self.n) for x, mk in zip(xs, mask)])
                acc += 0.5 * gw @ vals
            x1[j] = acc
        return np.concatenate([np.atleast_1d(np.asarray(y0, dtype=float)), x1.ravel()])

    def to_dict(self) -> dict:
        return {
            "format": "hjbs-model",
            "version": MODEL_FORMAT_VERSION,
            "kind": self.kind,
            "a0": self.a0.tolist(),
            "b0": self.b0.tolist(),
            "sigma": self.sigma.tolist(),
            "d": self.d,
            "eps_delay": self.eps_delay,
            "atoms": [[float(l), w.tolist()] for l, w in zip(self.atom_lags, self.atom_weights)],
            "m_lag": self.M_lag,
            "snap_error": self.snap_error,
        }


def build_delay_model(cfg: DelayConfig) -> DelayModel:
    return DelayModel(cfg)


def model_from_dict(d: dict):
    if d.get("format") != "hjbs-model" or d.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError("unsupported model document")
    if d["kind"] == "delay":
        return DelayModel(DelayConfig(d["a0"], d["b0"], d["sigma"], d["d"], d["eps_delay"],
                                      tuple((a[0], a[1]) for a in d["atoms"]), d["m_lag"]))
    if d["kind"] == "heat":
        c = d["config"]
        return HeatModel(HeatConfig(c["n_modes"], c["beta"], c["eps"], c["eta"],
                                    tuple(tuple(v) for v in c["p_vectors"]), c["inputs"]))
    return MatrixModel(d["A"], d["G"], d["C"], d["F"], name=d.get("name", "matrix"))


# module-level operations

def delay_semigroup_apply(model: DelayModel, t: float, x) -> np.ndarray:
    if t < 0:
        raise ValueError("negative time")
    X = as_array(x)
    if X.shape[-1] != model.dim:
        raise ValueError("dimension mismatch")
    return model.semigroup(t, np.atleast_2d(X)).reshape(X.shape) if t > 0 else X.copy()


def delay_semigroup_adjoint_apply(model: DelayModel, t: float, z) -> np.ndarray:
    if t < 0:
        raise ValueError("negative time")
    Z = as_array(z)
    if Z.shape[-1] != model.dim:
        raise ValueError("dimension mismatch")
    return model.semigroup_adjoint(t, np.atleast_2d(Z)).reshape(Z.shape) if t > 0 else Z.copy()


def etAB_first(model: DelayModel, t: float, u) -> np.ndarray:
    return model.etAB_first(t, u)


def projected_semigroup(model, t: float, x_bar) -> np.ndarray:
    """P e^{tA} x_bar; extended (H_bar) inputs need t > 0."""
    if t < 0:
        raise ValueError("negative time")
    x = x_bar if isinstance(x_bar, StateVector) else StateVector(x_bar)
    if len(x) != model.dim:
        raise ValueError("dimension mismatch")
    return model.project(t, x)


@dataclass(frozen=True)
class TrajectoryGrid:
    """Nodes and quadrature weights on (0, T]; ``rho`` adds the decay weight e^{-2 rho t}."""

    nodes: np.ndarray
    weights: np.ndarray
    rho: float = 0.0

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 1 or nodes.shape != weights.shape or len(nodes) == 0:
            raise ValueError("nodes and weights must be matching non-empty vectors")
        if nodes[0] <= 0 or np.any(np.diff(nodes) <= 0):
            raise ValueError("nodes must be positive and increasing")
        if np.any(weights <= 0):
            raise ValueError("weights must be positive")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def midpoint(cls, T: float, M: int, rho: float = 0.0) -> "TrajectoryGrid":
        h = T / M
        return cls(h * (np.arange(M) + 0.5), np.full(M, h), rho)

    @classmethod
    def infinite(cls, rho: float, M: int) -> "TrajectoryGrid":
        """L^2_rho surrogate truncated at 10 / rho."""
        if not rho > 0:
            raise ValueError("infinite-horizon grid needs rho > 0")
        return cls.midpoint(10.0 / rho, M, rho)

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1] + 0.5 * self.weights[-1])

    @property
    def sqrt_weights(self) -> np.ndarray:
        return np.sqrt(self.weights * np.exp(-2.0 * self.rho * self.nodes))


def upsilon_apply(model, grid: TrajectoryGrid, x_bar) -> np.ndarray:
    """Stacked sqrt(w_j e^{-2 rho t_j}) P e^{t_j A} x_bar, length M * n_features."""
    x = x_bar if isinstance(x_bar, StateVector) else StateVector(as_array(x_bar))
    blocks = [sw * model.project(t, x) for t, sw in zip(grid.nodes, grid.sqrt_weights)]
    return np.concatenate(blocks)


def upsilon_rows(model, grid: TrajectoryGrid, X: np.ndarray) -> np.ndarray:
    """Upsilon applied to a stack of ordinary states, shape (n, M * n_features)."""
    X = np.atleast_2d(X)
    return np.concatenate([sw * model.proj_rows(t, X) for t, sw in zip(grid.nodes, grid.sqrt_weights)], axis=1)


def upsilon_adjoint_apply(model, grid: TrajectoryGrid, z) -> np.ndarray:
    """sum_j sqrt(w_j e^{-2 rho t_j}) (P e^{t_j A})^* z_j in state coordinates (H inner product)."""
    z = as_array(z)
    k = model.n_features
    if z.shape[-1] != grid.size * k:
        raise ValueError("trajectory vector has the wrong length")
    Z = z.reshape(-1, grid.size, k)
    out = np.zeros((len(Z), model.dim))
    for j, (t, sw) in enumerate(zip(grid.nodes, grid.sqrt_weights)):
        out += sw * model.proj_adjoint(t, Z[:, j, :])
    return out[0] if z.ndim == 1 else out


def upsilon_noise_matrix(model, grid: TrajectoryGrid) -> np.ndarray:
    """Upsilon composed with ``embed_noise``: (M * n_features, n_noise)."""
    return np.vstack([sw * model.path_map(t) for t, sw in zip(grid.nodes, grid.sqrt_weights)])


def upsilon_control_matrix(model, grid: TrajectoryGrid, t: float) -> np.ndarray:
    """Upsilon e^{tA} C: (M * n_features, n_controls)."""
    return np.vstack([sw * model.proj_control(tj + t) for tj, sw in zip(grid.nodes, grid.sqrt_weights)])
