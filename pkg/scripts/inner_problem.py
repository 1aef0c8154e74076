"""Solve the inner linear problem for a manufactured orthogonal source, both time directions."""
import argparse

import numpy as np

from bubbletower.evolution import InnerSpec, inner_cauchy_solve, orthogonalize
from bubbletower.frac_core import QuadratureConfig, make_params


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--R", type=float, default=16.0)
    ap.add_argument("--a", type=float, default=2.0)
    ap.add_argument("--nu", type=float, default=1.0)
    ap.add_argument("--span", type=float, default=40.0)
    ap.add_argument("--n-steps", type=int, default=400)
    args = ap.parse_args()
    P = make_params(4, 0.5, 1, 10.0)
    cfg = QuadratureConfig(n_radial=192, r_min=1e-3)
    h = orthogonalize(lambda y, tau: abs(tau) ** -args.nu * (1 + np.asarray(y)) ** (-2 * P.s - args.a),
                      args.R, P, cfg)
    for direction, tau0 in (("forward", 1.0), ("ancient", -1.0)):
        spec = InnerSpec(args.R, tau0, h, args.a, args.nu, tau1=tau0 + np.sign(tau0) * args.span,
                         n_steps=args.n_steps, direction=direction)
        res = inner_cauchy_solve(spec, P, cfg)
        print(f"{direction:8s} e0={res.e0:+.6e} constant={res.constant:.4f} "
              f"orthogonality={res.orthogonality:.2e}")


if __name__ == "__main__":
    main()
