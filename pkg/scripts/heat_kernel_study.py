"""L2 error of the forward solver against the exact Gaussian for pure diffusion, over a mesh ladder."""
import argparse
import math

from mfflow.fp import FpConfig, solve_fp
from mfflow.grid import gaussian, l2_norm
from mfflow.scenarios import build


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--levels", type=int, default=4)
    args = p.parse_args()
    print("n_points,n_steps,l2_error,ratio")
    prev = None
    for k in range(args.levels):
        n, steps = 200 * 2**k + 1, 250 * 2**k
        sc = build("pure-diffusion", grid={"n_points": n}, time={"n_steps": steps})
        path = solve_fp(sc.model, sc.mu, sc.t, sc.T, FpConfig(steps))
        err = l2_norm(path.final - gaussian(sc.grid, 0.0, math.sqrt(0.25 + 2.0 * (sc.T - sc.t))))
        print(f"{n},{steps},{err:.6e},{'' if prev is None else f'{prev / err:.3f}'}")
        prev = err


if __name__ == "__main__":
    main()
