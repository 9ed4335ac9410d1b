"""Finite-difference convergence slopes for the density, state and value-pairing derivatives."""
import argparse

from mfflow.scenarios import build
from mfflow.verification import TARGETS, convergence_study, slope_ok


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--scenario", default="state-invariant-ref")
    p.add_argument("--h", type=float, nargs="+", default=[0.2, 0.1, 0.05, 0.025])
    p.add_argument("--direction", type=int, default=0)
    args = p.parse_args()
    sc = build(args.scenario)
    print("target,h,error")
    summary = []
    for target in TARGETS:
        rep = convergence_study(target, sc, args.h, args.direction)
        for h, e in zip(rep.h_values, rep.errors):
            print(f"{target},{h},{e:.6e}")
        summary.append((target, rep.slope, rep.floor_limited, slope_ok(rep)))
    for target, slope, floored, ok in summary:
        print(f"# {target}: slope={'n/a' if slope is None else f'{slope:.3f}'} floor_limited={floored} ok={ok}")


if __name__ == "__main__":
    main()
