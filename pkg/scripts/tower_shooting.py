"""Track a two-bubble tower by shooting on the unstable seed and fit the inner scale."""
import argparse
import json

from bubbletower import checks
from bubbletower.evolution import shoot_tower
from bubbletower.frac_core import make_params
from bubbletower.param_dynamics import matching_constant


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=4)
    ap.add_argument("--s", type=float, default=0.5)
    ap.add_argument("--t0", type=float, default=2.0)
    ap.add_argument("--t1", type=float, default=3.0)
    ap.add_argument("--n-radial", type=int, default=400)
    args = ap.parse_args()
    P = make_params(args.n, args.s, 2, args.t0)
    cfg = checks.evolution_grid(n_radial=args.n_radial)
    c = float(matching_constant(P, cfg))
    track = shoot_tower(P, c, args.t0, args.t1, cfg)
    print(json.dumps(track.to_dict(), indent=2, default=float))


if __name__ == "__main__":
    main()
