"""Kernel action versus directional solve, per direction, across grid refinements."""
import argparse
import time

from mfflow.fp import FpConfig, solve_fp
from mfflow.linearized import kernel_directional_discrepancy, solve_directional, solve_kernel
from mfflow.scenarios import build


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--scenario", default="state-invariant-ref")
    p.add_argument("--n-points", type=int, nargs="+", default=[201, 401, 801])
    args = p.parse_args()
    print("n_points,direction,max_relative_gap,seconds")
    for n in args.n_points:
        sc = build(args.scenario, grid={"n_points": n})
        cfg = FpConfig(sc.n_steps)
        t0 = time.perf_counter()
        path = solve_fp(sc.model, sc.mu, sc.t, sc.T, cfg)
        k = solve_kernel(sc.model, path, cfg)[2]
        secs = time.perf_counter() - t0
        for i, d in enumerate(sc.directions):
            gap = kernel_directional_discrepancy(k, solve_directional(sc.model, path, d, cfg), d).max()
            print(f"{n},{i},{gap:.6e},{secs:.2f}")


if __name__ == "__main__":
    main()
