"""INI run configuration: model, costs, solver, verification, cross-validation, simulation."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from .hjb import ControlSet, CostSpec, SolverConfig
from .models import DelayConfig, HeatConfig, TrajectoryGrid, build_delay_model, build_heat_model, scalar_model
from .smoothing import VerifySettings


class ConfigError(ValueError):
    pass


def _floats(text: str) -> list:
    return [float(v) for v in text.replace(",", " ").split()]


def _matrix(text: str) -> tuple:
    """``1 0; 0 1`` -> ((1, 0), (0, 1))."""
    return tuple(tuple(_floats(row)) for row in text.split(";") if row.strip())


@dataclass
class CrossvalConfig:
    n_paths: int = 4000
    dt: float = 0.01
    probes: list = field(default_factory=list)
    policies: tuple = ("const:-1", "const:0", "const:1", "greedy")
    history: float = 0.0


@dataclass
class SimulateConfig:
    policy: str = "const:0"
    n_paths: int = 10
    dt: float = 0.01
    t0: float = 0.0
    x0: tuple = (0.0,)
    history: float = 0.0


@dataclass
class RunConfig:
    kind: str
    model_params: dict
    costs: dict
    solver: SolverConfig
    verify: VerifySettings
    crossval: CrossvalConfig
    simulate: SimulateConfig
    seed: int = 0
    threads: int = 1
    raw: dict = field(default_factory=dict)

    def build_model(self):
        p = self.model_params
        if self.kind == "scalar":
            return scalar_model(p["a"], p["g"], p["c"])
        if self.kind == "heat":
            return build_heat_model(HeatConfig(**p))
        return build_delay_model(DelayConfig(**p))

    def build_costs(self, model) -> CostSpec:
        c = self.costs
        U = ControlSet.parse(c["controls"], model.n_controls)
        return CostSpec.from_names(c["phi"], c["ell0"], U, c["ell1"])


def _get(cp, sec, key, default, conv=str):
    if not cp.has_section(sec) or not cp.has_option(sec, key):
        return default
    raw = cp.get(sec, key)
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"[{sec}] {key} = {raw!r}: {exc}") from exc


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "auto", "none") else float(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _probes(text: str) -> list:
    """``t:y1,y2; t:y`` -> [(t, (y1, y2)), ...] (state coordinates in the feature basis)."""
    out = []
    for item in text.split(";"):
        if not item.strip():
            continue
        t, _, ys = item.partition(":")
        out.append((float(t), tuple(_floats(ys))))
    return out


def load_config(path) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    kind = _get(cp, "model", "kind", "scalar")
    if kind == "scalar":
        params = {k: _get(cp, "scalar", k, d, float) for k, d in (("a", -1.0), ("g", 1.0), ("c", 1.0))}
    elif kind == "heat":
        params = {
            "n_modes": _get(cp, "heat", "n_modes", 20, int),
            "beta": _get(cp, "heat", "beta", 1.0, float),
            "eps": _get(cp, "heat", "eps", 0.1, float),
            "eta": _get(cp, "heat", "eta", 1.0, float),
            "p_vectors": _get(cp, "heat", "p_vectors", ((1.0,),), _matrix),
            "inputs": _get(cp, "heat", "inputs", "both"),
        }
    elif kind == "delay":
        atoms = _get(cp, "delay", "atoms", "-1:1")
        params = {
            "a0": _get(cp, "delay", "a0", ((0.0,),), _matrix),
            "b0": _get(cp, "delay", "b0", ((1.0,),), _matrix),
            "sigma": _get(cp, "delay", "sigma", ((1.0,),), _matrix),
            "d": _get(cp, "delay", "d", 1.0, float),
            "eps_delay": _get(cp, "delay", "eps_delay", 1.0, float),
            "m_lag": _get(cp, "delay", "m_lag", 100, int),
        }
        try:
            params["atoms"] = tuple((float(a.split(":")[0]), _matrix(a.split(":")[1])) for a in atoms.split("|")
                                    if a.strip())
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"[delay] atoms: {exc}") from exc
    else:
        raise ConfigError(f"unknown model kind {kind!r}")

    solver = SolverConfig(
        T=_get(cp, "solver", "T", 1.0, float),
        n_nodes=_get(cp, "solver", "n_nodes", 20, int),
        tol=_get(cp, "solver", "tol", 1e-3, float),
        max_iter=_get(cp, "solver", "max_iter", 30, int),
        n_mc=_get(cp, "solver", "n_mc", 2000, int),
        n_time=_get(cp, "solver", "n_time", 8, int),
        grid_per_dim=_get(cp, "solver", "grid_per_dim", 41, int),
        window_policy=_get(cp, "solver", "window_policy", "split"),
        mu=_get(cp, "solver", "mu", None, _opt_float),
        gamma=_get(cp, "solver", "gamma", None, _opt_float),
        kappa=_get(cp, "solver", "kappa", None, _opt_float),
        halfwidth_sd=_get(cp, "solver", "halfwidth_sd", 5.0, float),
        halfwidth=_get(cp, "solver", "halfwidth", None, _opt_float),
        path_nodes=_get(cp, "solver", "path_nodes", 2, int),
        cutoff=_get(cp, "solver", "cutoff", 1e-10, float),
    )
    if solver.window_policy not in ("split", "weighted"):
        raise ConfigError("window_policy must be split or weighted")
    if solver.max_iter < 0 or solver.n_nodes < 1 or solver.n_mc < 2:
        raise ConfigError("solver sizes out of range")

    t_min = _get(cp, "verify", "t_min", 1e-3, float)
    t_max = _get(cp, "verify", "t_max", 1e-1, float)
    n_t = _get(cp, "verify", "n_t", 9, int)
    variants = tuple(v.strip() for v in _get(cp, "verify", "variants", "base").split(",") if v.strip())
    for v in variants:
        if v not in ("base", "lifted", "conv"):
            raise ConfigError(f"unknown verify variant {v!r}")
    rho = _get(cp, "verify", "rho", 1.0, float)
    lifted_nodes = _get(cp, "verify", "lifted_nodes", 100, int)
    lifted_T = _get(cp, "verify", "lifted_T", None, _opt_float)
    grid = TrajectoryGrid.midpoint(lifted_T, lifted_nodes, rho) if lifted_T else TrajectoryGrid.infinite(rho, lifted_nodes)
    verify = VerifySettings(
        variants=variants,
        t_grid=np.logspace(np.log10(t_min), np.log10(t_max), n_t),
        lifted_grid=grid,
        conv_s=_get(cp, "verify", "conv_s", 0.05, float),
        conv_nodes=_get(cp, "verify", "conv_nodes", 8, int),
        cutoff=_get(cp, "verify", "cutoff", 1e-10, float),
        lifted_cutoff=_get(cp, "verify", "lifted_cutoff", None, _opt_float),
        knee=_get(cp, "verify", "knee", None, _opt_float),
        horizon=_get(cp, "verify", "horizon", 1.0, float),
        r2_min=_get(cp, "verify", "r2_min", 0.95, float),
        gamma_range=(_get(cp, "verify", "gamma_min", 0.0, float), _get(cp, "verify", "gamma_max", 1.0, float)),
    )
    costs = {
        "phi": _get(cp, "costs", "phi", "cos"),
        "ell0": _get(cp, "costs", "ell0", "zero"),
        "ell1": _get(cp, "costs", "ell1", "zero"),
        "controls": _get(cp, "costs", "controls", "box:-1:1:21"),
    }
    crossval = CrossvalConfig(
        n_paths=_get(cp, "crossval", "n_paths", 4000, int),
        dt=_get(cp, "crossval", "dt", 0.01, float),
        probes=_get(cp, "crossval", "probes", [], _probes),
        policies=tuple(p.strip() for p in _get(cp, "crossval", "policies", "const:-1,const:0,const:1,greedy").split(",")
                       if p.strip()),
        history=_get(cp, "crossval", "history", 0.0, float),
    )
    simulate = SimulateConfig(
        policy=_get(cp, "simulate", "policy", "const:0"),
        n_paths=_get(cp, "simulate", "n_paths", 10, int),
        dt=_get(cp, "simulate", "dt", 0.01, float),
        t0=_get(cp, "simulate", "t0", 0.0, float),
        x0=tuple(_get(cp, "simulate", "x0", [0.0], _floats)),
        history=_get(cp, "simulate", "history", 0.0, float),
    )
    raw = {s: dict(cp.items(s)) for s in cp.sections()}
    rc = RunConfig(kind, params, costs, solver, verify, crossval, simulate,
                   _get(cp, "run", "seed", 0, int), _get(cp, "run", "threads", 1, int), raw)
    try:
        model = rc.build_model()
        rc.build_costs(model)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return rc


def probe_state(model, features, history: float = 0.0) -> np.ndarray:
    """Ordinary state whose projection is ``features``.

    Matrix models: x = F^T y.  Delay models: x0 = y and the pending input from
    a constant past control ``history``.
    """
    y = np.asarray(features, dtype=float)
    if hasattr(model, "history_state"):
        return model.history_state(y, lambda th: np.full(model.n_controls, history))
    return model.F.T @ y
