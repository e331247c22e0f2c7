"""Linear-operator and Gaussian-measure engine.

Semigroup actions, Ornstein-Uhlenbeck covariances, Gaussian sampling,
pseudoinverse square roots and Cameron-Martin densities.  Models are duck-typed:
anything with ``dim``, ``n_noise``, ``semigroup(t, x)``, ``noise_cov(t)`` and
``embed_noise(w)`` works (see ``hjbs.models``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng

SYM_TOL = 1e-10
NEG_EIG_TOL = 1e-10
DEFAULT_CUTOFF = 1e-10
RANGE_TOL = 1e-6


class RangeViolationError(ValueError):
    """A vector lies outside the numerically retained range of a covariance."""


@dataclass(frozen=True)
class StateVector:
    """Coordinates of a state in a model basis.

    ``space`` is ``"H"`` or ``"H_bar"``.  Delay models may attach point masses
    in the lag variable (``atom_lags`` in [-d, 0], ``atom_masses`` of shape
    (K, n)); these are the measure-valued second components that only live
    in the extended space.
    """

    coords: np.ndarray
    space: str = "H"
    atom_lags: np.ndarray | None = None
    atom_masses: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.ndim != 1:
            raise ValueError("coords must be a vector")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite state coordinates")
        if self.space not in ("H", "H_bar"):
            raise ValueError(f"unknown space tag {self.space!r}")
        object.__setattr__(self, "coords", c)
        if self.atom_lags is not None:
            lags = np.atleast_1d(np.asarray(self.atom_lags, dtype=float))
            masses = np.asarray(self.atom_masses, dtype=float).reshape(len(lags), -1)
            if self.space != "H_bar":
                raise ValueError("point masses only exist in the extended space H_bar")
            object.__setattr__(self, "atom_lags", lags)
            object.__setattr__(self, "atom_masses", masses)

    @property
    def has_atoms(self) -> bool:
        return self.atom_lags is not None and len(self.atom_lags) > 0

    def __len__(self):
        return len(self.coords)


@dataclass(frozen=True)
class OperatorMatrix:
    """A discretized operator with the spaces it maps between."""

    entries: np.ndarray
    domain: str = "H"
    codomain: str = "H"

    def __post_init__(self):
        e = np.atleast_2d(np.asarray(self.entries, dtype=float))
        if not np.all(np.isfinite(e)):
            raise ValueError("non-finite operator entries")
        object.__setattr__(self, "entries", e)

    @property
    def T(self):
        return OperatorMatrix(self.entries.T, self.codomain, self.domain)

    def __matmul__(self, other):
        if isinstance(other, OperatorMatrix):
            return OperatorMatrix(self.entries @ other.entries, other.domain, self.codomain)
        return self.entries @ np.asarray(other)


def as_array(m) -> np.ndarray:
    if isinstance(m, OperatorMatrix):
        return m.entries
    if isinstance(m, StateVector):
        return m.coords
    return np.asarray(m, dtype=float)


def _check_symmetric(M: np.ndarray) -> None:
    scale = max(np.abs(M).max(), np.finfo(float).tiny)
    if np.abs(M - M.T).max() > SYM_TOL * scale:
        raise ValueError("matrix is not symmetric")


class PsdFactor:
    """Eigen-decomposition of a PSD matrix truncated at a relative cutoff.

    ``vals``/``vecs`` hold the retained eigenpairs (eigenvalue above
    ``cutoff * largest``).  Built either from the matrix itself or from a
    factor ``F`` with ``M = F F^T`` (SVD of the factor keeps twice the
    significant digits on badly conditioned Gram matrices).
    """

    def __init__(self, vals: np.ndarray, vecs: np.ndarray, cutoff: float, lam_max: float):
        self.vals = vals
        self.vecs = vecs
        self.cutoff = cutoff
        self.lam_max = lam_max

    @classmethod
    def from_matrix(cls, M, cutoff: float = DEFAULT_CUTOFF) -> "PsdFactor":
        M = as_array(M)
        _check_symmetric(M)
        vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
        lam_max = max(vals[-1], 0.0) if len(vals) else 0.0
        if len(vals) and vals[0] < -NEG_EIG_TOL * max(lam_max, np.finfo(float).tiny):
            raise ValueError(f"matrix is not PSD (min eigenvalue {vals[0]:.3e})")
        keep = vals > cutoff * lam_max if lam_max > 0 else np.zeros(len(vals), bool)
        return cls(vals[keep], vecs[:, keep], cutoff, lam_max)

    @classmethod
    def from_factor(cls, F, cutoff: float = DEFAULT_CUTOFF) -> "PsdFactor":
        F = as_array(F)
        U, S, _ = np.linalg.svd(F, full_matrices=False)
        vals = S**2
        lam_max = vals[0] if len(vals) else 0.0
        keep = vals > cutoff * lam_max if lam_max > 0 else np.zeros(len(vals), bool)
        return cls(vals[keep][::-1], U[:, keep][:, ::-1], cutoff, lam_max)

    @property
    def rank(self) -> int:
        return len(self.vals)

    def whiten(self, y: np.ndarray) -> np.ndarray:
        """Retained-eigenbasis coordinates of M^{-1/2} y (columns or last axis of y)."""
        y = np.asarray(y, dtype=float)
        return (y @ self.vecs) / np.sqrt(self.vals) if y.ndim == 1 else (self.vecs.T @ y) / np.sqrt(self.vals)[:, None]

    def inv_sqrt(self) -> np.ndarray:
        return (self.vecs / np.sqrt(self.vals)) @ self.vecs.T

    def sqrt(self) -> np.ndarray:
        return (self.vecs * np.sqrt(self.vals)) @ self.vecs.T

    def projector(self) -> np.ndarray:
        return self.vecs @ self.vecs.T

    def range_residual(self, y) -> float:
        """Relative Frobenius defect of y (vector or column matrix) against the retained range."""
        y = np.asarray(y, dtype=float)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        yy = y if y.ndim == 2 else y[:, None]
        r = yy - self.vecs @ (self.vecs.T @ yy)
        return float(np.linalg.norm(r) / ny)


@dataclass
class GaussianMeasure:
    """N(mean, cov) with a cached eigendecomposition used for sampling."""

    mean: np.ndarray
    cov: np.ndarray
    _vals: np.ndarray = field(init=False, repr=False)
    _vecs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.mean = as_array(self.mean).ravel()
        self.cov = np.atleast_2d(as_array(self.cov))
        if self.cov.shape != (len(self.mean), len(self.mean)):
            raise ValueError("mean/covariance shape mismatch")
        _check_symmetric(self.cov)
        vals, vecs = np.linalg.eigh(0.5 * (self.cov + self.cov.T))
        top = max(vals[-1], 0.0)
        if vals[0] < -NEG_EIG_TOL * max(top, np.finfo(float).tiny):
            raise ValueError(f"covariance is not PSD (min eigenvalue {vals[0]:.3e})")
        self._vals = np.clip(vals, 0.0, None)
        self._vecs = vecs

    @property
    def sqrt_factor(self) -> np.ndarray:
        """L with L L^T = cov (degenerate directions map to zero)."""
        return self._vecs * np.sqrt(self._vals)

    def sample(self, n: int, seed: int, *keys) -> np.ndarray:
        xi = rng.standard_normal(seed, (n, len(self.mean)), *keys)
        return self.mean + xi @ self.sqrt_factor.T


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise ValueError("nodes and weights must be matching vectors")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("quadrature nodes must be strictly increasing")
        if np.any(weights <= 0):
            raise ValueError("quadrature weights must be positive")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def gauss_legendre(cls, a: float, b: float, n: int = 64) -> "QuadratureRule":
        x, w = np.polynomial.legendre.leggauss(n)
        half = 0.5 * (b - a)
        return cls(a + half * (x + 1.0), half * w)

    @classmethod
    def graded(cls, a: float, b: float, n: int) -> "QuadratureRule":
        """Endpoint-clustered rule on (a, b) for integrands singular at both ends.

        Each half of the interval is split into cells halving in width towards
        the endpoint.  Interior cells use their midpoint; the two end cells
        sample at a quarter of their width from the endpoint, which integrates
        an inverse square root singularity exactly.
        """
        if not b > a:
            raise ValueError("empty interval")
        k = max(1, (n + 1) // 2)
        half = 0.5 * (b - a)
        edges = np.concatenate([[0.0], half * 2.0 ** -np.arange(k - 1, -1, -1.0)])
        widths = np.diff(edges)
        mids = 0.5 * (edges[:-1] + edges[1:])
        mids[0] = 0.25 * edges[1]
        left = a + mids
        right = b - mids[::-1]
        return cls(np.concatenate([left, right]), np.concatenate([widths, widths[::-1]]))

    @property
    def total(self) -> float:
        return float(self.weights.sum())


def _rows(x) -> tuple[np.ndarray, bool]:
    a = as_array(x)
    return (a[None, :], True) if a.ndim == 1 else (a, False)


def semigroup_apply(model, t: float, x):
    """e^{tA}x; ``x`` may be a StateVector, a vector or a stack of row vectors."""
    if t < 0:
        raise ValueError("negative time")
    if isinstance(x, StateVector):
        if len(x) != model.dim:
            raise ValueError(f"state has dimension {len(x)}, model expects {model.dim}")
        if t == 0:
            return x
        if x.has_atoms:
            return model.semigroup_bar(t, x)
        return StateVector(model.semigroup(t, x.coords[None, :])[0], x.space)
    rows, single = _rows(x)
    if rows.shape[1] != model.dim:
        raise ValueError(f"state has dimension {rows.shape[1]}, model expects {model.dim}")
    out = rows.copy() if t == 0 else model.semigroup(t, rows)
    return out[0] if single else out


def ou_covariance(model, t: float, rule: QuadratureRule | None = None) -> np.ndarray:
    """Q_t in state coordinates (closed form for diagonal models)."""
    if not t > 0:
        raise ValueError("ou_covariance needs t > 0")
    if rule is not None:
        if rule.nodes[0] <= 0 or rule.nodes[-1] > t * (1 + 1e-12):
            raise ValueError("quadrature nodes must lie in (0, t]")
        Q = model.noise_cov(t, rule=rule)
    else:
        Q = model.noise_cov(t)
    E = model.embed_noise(np.eye(model.n_noise))
    Qfull = E.T @ Q @ E
    Qfull = 0.5 * (Qfull + Qfull.T)
    vals = np.linalg.eigvalsh(Qfull)
    if vals[0] < -1e-9 * max(vals[-1], 1e-300):
        raise ValueError("covariance quadrature produced a non-PSD matrix")
    return Qfull


def sample_gaussian(measure: GaussianMeasure, n: int, seed: int, *keys) -> np.ndarray:
    """``n`` draws as rows; deterministic in (seed, keys)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return measure.sample(n, seed, *keys)


def psd_sqrt_pseudoinverse(M, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """M^{-1/2} on the retained eigenspace, zero on its complement."""
    return PsdFactor.from_matrix(M, cutoff).inv_sqrt()


def cameron_martin_density(Sigma, y, z, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """Density of N(y, Sigma) against N(0, Sigma) evaluated at z (rows allowed)."""
    fac = PsdFactor.from_matrix(Sigma, cutoff)
    y = as_array(y).ravel()
    res = fac.range_residual(y)
    if res > RANGE_TOL:
        raise RangeViolationError(f"shift outside retained range (residual {res:.3e})")
    a = fac.whiten(y)
    zz = as_array(z)
    b = zz @ (fac.vecs / np.sqrt(fac.vals))
    return np.exp(b @ a - 0.5 * a @ a)


def transition_samples(model, t: float, x, n_mc: int, seed: int, *keys) -> np.ndarray:
    """Rows e^{tA}x + W_A(t) for ``n_mc`` draws of the stochastic convolution."""
    mean = semigroup_apply(model, t, as_array(x))
    w = GaussianMeasure(np.zeros(model.n_noise), model.noise_cov(t)).sample(n_mc, seed, *keys)
    return mean + model.embed_noise(w)


def apply_transition(model, phi, t: float, x, n_mc: int, seed: int, return_stderr: bool = False):
    """Monte-Carlo R_t[phi](x) = E phi(e^{tA}x + W_A(t)); exact phi(x) at t = 0."""
    if t < 0:
        raise ValueError("negative time")
    if t == 0:
        val = float(np.asarray(phi(as_array(x)[None, :]))[0])
        return (val, 0.0) if return_stderr else val
    vals = np.asarray(phi(transition_samples(model, t, x, n_mc, seed, "transition")), dtype=float)
    est = float(vals.mean())
    if return_stderr:
        return est, float(vals.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0
    return est
