"""Command-line entry point: ``hjbs {verify,solve,crossval,simulate} --config run.ini --out dir``.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig, load_config, probe_state
from .control_sim import Policy, cross_validate, greedy_policy, simulate_state, write_crossval_csv, write_paths_csv
from .hjb import ContractionError, HJBConvergenceError, ValueField, solve_hjb
from .smoothing import InclusionError, verify_hypotheses, write_lambda_report

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _threads(arg) -> int:
    if arg is not None:
        return int(arg)
    env = os.environ.get("HJBS_THREADS")
    return int(env) if env else 1


def _manifest(out, command, rc: RunConfig, seed, outputs, passed, started, extra=None):
    doc = {
        "command": command,
        "config": rc.raw,
        "seed": seed,
        "versions": {"hjbs": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "wall_time": time.perf_counter() - started,
        "outputs": sorted(outputs),
        "passed": bool(passed),
    }
    if extra:
        doc.update(extra)
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=float)


def _policy(spec: str, model, costs, field=None) -> Policy:
    U = costs.hamiltonian.controls
    if spec == "greedy":
        if field is None:
            raise ConfigError("greedy policy needs a value field")
        return greedy_policy(field, model, costs)
    kind, _, arg = spec.partition(":")
    if kind == "const":
        vals = [float(v) for v in arg.split(",")]
        if len(vals) == 1:
            vals = vals * model.n_controls
        return Policy.constant(vals, U, name=spec)
    raise ConfigError(f"unknown policy {spec!r}")


def cmd_verify(rc: RunConfig, out: str, seed: int, threads: int, started) -> int:
    model = rc.build_model()
    res = verify_hypotheses(model, rc.verify, threads)
    write_lambda_report(os.path.join(out, "lambda_report.csv"), model.name, res)
    fits = {k: {"kappa": f.kappa, "gamma": f.gamma, "r2": f.r2} for k, f in res.fits.items()}
    _manifest(out, "verify", rc, seed, ["lambda_report.csv", "manifest.json"], res.all_passed, started,
              {"fits": fits, "variant_passed": res.passed})
    return EXIT_OK if res.all_passed else EXIT_FAIL


def cmd_solve(rc: RunConfig, out: str, seed: int, threads: int, started) -> int:
    model = rc.build_model()
    costs = rc.build_costs(model)
    cfg = rc.solver
    cfg.seed, cfg.threads = seed, threads
    ok = True
    try:
        field, rep = solve_hjb(model, costs, cfg)
    except ContractionError as exc:
        field, rep, ok = exc.field, exc.report, False
    except HJBConvergenceError as exc:
        field, rep, ok = exc.field, exc.report, False
    field.meta["tol"] = cfg.tol
    field.save(os.path.join(out, "value_field.json"))
    with open(os.path.join(out, "convergence.json"), "w") as fh:
        json.dump(rep.to_dict(), fh, indent=2, sort_keys=True)
    _manifest(out, "solve", rc, seed, ["value_field.json", "convergence.json", "manifest.json"], ok, started,
              {"converged": rep.converged, "iterations": rep.iterations})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_crossval(rc: RunConfig, out: str, seed: int, threads: int, started, field_path: str) -> int:
    model = rc.build_model()
    costs = rc.build_costs(model)
    try:
        field = ValueField.load(field_path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load value field: {exc}") from exc
    policies = [_policy(p, model, costs, field) for p in rc.crossval.policies]
    probes = [(t, probe_state(model, y, rc.crossval.history)) for t, y in rc.crossval.probes]
    if not probes:
        raise ConfigError("[crossval] probes is empty")
    budgets = {"n_paths": rc.crossval.n_paths, "dt": rc.crossval.dt, "tol": field.meta.get("tol", rc.solver.tol)}
    rep = cross_validate(model, costs, field, policies, probes, budgets, seed)
    write_crossval_csv(os.path.join(out, "crossval.csv"), rep)
    _manifest(out, "crossval", rc, seed, ["crossval.csv", "manifest.json"], rep["all_passed"], started,
              {"cost_scale": rep["cost_scale"]})
    return EXIT_OK if rep["all_passed"] else EXIT_FAIL


def cmd_simulate(rc: RunConfig, out: str, seed: int, threads: int, started, field_path: str | None) -> int:
    model = rc.build_model()
    costs = rc.build_costs(model)
    field = ValueField.load(field_path) if field_path else None
    sc = rc.simulate
    pol = _policy(sc.policy, model, costs, field)
    x = probe_state(model, sc.x0, sc.history)
    T = field.T if field is not None else rc.solver.T
    ps = simulate_state(model, pol, sc.t0, x, T, sc.dt, seed, sc.n_paths, ("simulate",), costs)
    write_paths_csv(os.path.join(out, "paths.csv"), ps, sc.n_paths)
    _manifest(out, "simulate", rc, seed, ["paths.csv", "manifest.json"], True, started,
              {"mean_cost": float(ps.cost.mean())})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hjbs", description="Smoothing checks and HJB solves for OU control problems.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("verify", "solve", "crossval", "simulate"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--threads", type=int, default=None)
        if name in ("crossval", "simulate"):
            s.add_argument("--field", required=(name == "crossval"), help="value_field.json from a solve run")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    started = time.perf_counter()
    try:
        rc = load_config(args.config)
        seed = args.seed if args.seed is not None else rc.seed
        threads = _threads(args.threads if args.threads is not None else (rc.threads if rc.threads > 1 else None))
        os.makedirs(args.out, exist_ok=True)
        if args.command == "verify":
            return cmd_verify(rc, args.out, seed, threads, started)
        if args.command == "solve":
            return cmd_solve(rc, args.out, seed, threads, started)
        if args.command == "crossval":
            return cmd_crossval(rc, args.out, seed, threads, started, args.field)
        return cmd_simulate(rc, args.out, seed, threads, started, args.field)
    except ConfigError as exc:
        print(f"hjbs: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InclusionError as exc:
        print(f"hjbs: range inclusion failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
