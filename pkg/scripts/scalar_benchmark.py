"""Scalar OU control benchmark: Picard solution against an implicit finite-difference solve.

dX = (-X + u) dt + dW, u in [-1, 1], terminal cost cos(x).  Prints the value
error at a few states and the solver cost for a grid of (n_nodes, n_mc).
"""

import argparse
import os
import sys
import time

import numpy as np

from hjbs.hjb import ControlSet, CostSpec, SolverConfig, evaluate_value, solve_hjb
from hjbs.models import scalar_model

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "tests"))
from pde_oracle import scalar_hjb_fd  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--T", type=float, default=1.0)
    ap.add_argument("--nodes", type=int, nargs="+", default=[10, 20])
    ap.add_argument("--mc", type=int, nargs="+", default=[4000, 16000])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    model = scalar_model()
    costs = CostSpec.from_names("cos", "zero", ControlSet.box(-1, 1, 21))
    x, v = scalar_hjb_fd(np.cos, args.T)
    probes = (0.0, 0.3, 1.0)
    print("reference v(0, x):", ", ".join(f"{p}: {np.interp(p, x, v):.5f}" for p in probes))
    for nn in args.nodes:
        for nmc in args.mc:
            cfg = SolverConfig(T=args.T, n_nodes=nn, n_mc=nmc, window_policy="weighted", gamma=0.5, kappa=1.0,
                               seed=args.seed, threads=args.threads)
            t0 = time.perf_counter()
            w, rep = solve_hjb(model, costs, cfg)
            errs = [evaluate_value(w, 0.0, [p], model)["value"] - np.interp(p, x, v) for p in probes]
            print(f"n_nodes={nn:<3} n_mc={nmc:<6} iterations={rep.iterations:<2} max|err|={max(map(abs, errs)):.4f} "
                  f"errors=[{', '.join(f'{e:+.4f}' for e in errs)}] {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
