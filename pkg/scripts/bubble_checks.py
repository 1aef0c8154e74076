"""Steady-object checks for the three reference dimension/order pairs.

Prints the profile residual, the kernel residual of L0 and the matching
constant from both routes.
"""
import argparse
import json

from bubbletower import checks
from bubbletower.frac_core import QuadratureConfig, make_params


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-radial", type=int, default=QuadratureConfig().n_radial)
    args = ap.parse_args()
    cfg = QuadratureConfig(n_radial=args.n_radial)
    for n, s in checks.BUBBLE_CASES:
        P = make_params(n, s, 1, 10.0)
        row = {"n": n, "s": s,
               "residual": checks.bubble_residual(P, cfg)["sup_rel_residual"],
               "c": checks.matching(P, cfg)["c"]}
        row["l0_residual"] = checks.l0_kernel(P, cfg)["l0_z_residual"]
        print(json.dumps(row))


if __name__ == "__main__":
    main()
