"""Command line entry point: configuration, dispatch, manifests and CSV/JSON emission.

Configuration files are JSON objects with the keys

    subcommand   one of SUBCOMMANDS
    params       n, s, k, t0, direction, sigma, delta, epsilon, alpha_w, a_inner, nu
    quadrature   fields of QuadratureConfig
    options      subcommand options (see OPTION_DEFAULTS)
    seed, workers, out_dir

Flags override the file; the output directory is taken from --out, then the
BUBBLETOWER_OUT environment variable, then the file, then runs/<subcommand>.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .errors import ArtifactError, BlowupDetected, HypothesisViolated, ValidationError
from .frac_core import ModelParams, QuadratureConfig, make_params

SUBCOMMANDS = ("constants", "profile", "param-ode", "ansatz", "kernel-check", "evolve", "inner")
ENV_OUT = "BUBBLETOWER_OUT"
PARAM_KEYS = ("n", "s", "k", "t0", "direction", "sigma", "delta", "epsilon", "alpha_w", "a_inner", "nu")
TOP_KEYS = ("subcommand", "params", "quadrature", "options", "seed", "workers", "out_dir")

OPTION_DEFAULTS = {
    "constants": {},
    "profile": {"n_points": 60},
    "param-ode": {"t_start": 1e3, "t_end": 1e6, "n_times": 20, "perturb": 0.2},
    "ansatz": {"t": 1e4, "times": [1e4, 1e5], "per_decade": 24},
    "kernel-check": {"case": "suite", "case_params": {}, "per_region": 24, "t_lo": 1e3, "t_hi": 1e4,
                     "t_per_decade": 6},
    "evolve": {"mode": "steady", "t_start": 0.0, "t_end": 1.0, "n_snapshots": 8, "amplitude": 1.05,
               "n_radial": 400, "r_min": 1e-7, "r_max": 1e4, "ceiling_factor": 1e6},
    "inner": {"R": 16.0, "tau0": 1.0, "tau1": 41.0, "n_steps": 400, "n_radial": 192, "r_min": 1e-3,
              "a": None, "nu": None},
}

EXIT_OK, EXIT_VALIDATION, EXIT_HYPOTHESIS, EXIT_NUMERICAL = 0, 2, 3, 4


@dataclass
class RunConfig:
    subcommand: str
    params: ModelParams
    cfg: QuadratureConfig
    options: dict = field(default_factory=dict)
    seed: int = 0
    workers: int = 1
    out_dir: Optional[str] = None
    overrides: list = field(default_factory=list)

    def to_dict(self):
        """The file form of this configuration; parse_config reads it back unchanged."""
        params = {k: getattr(self.params, k) for k in PARAM_KEYS}
        if not math.isfinite(params["a_inner"]):
            del params["a_inner"]
        return {"subcommand": self.subcommand, "params": params, "quadrature": asdict(self.cfg),
                "options": dict(self.options), "seed": self.seed, "workers": self.workers,
                "out_dir": self.out_dir}


# ---------------------------------------------------------------- parsing

def _parser():
    ap = argparse.ArgumentParser(prog="bubbletower", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="JSON configuration file")
    for key in PARAM_KEYS:
        kind = int if key in ("n", "k") else (str if key == "direction" else float)
        ap.add_argument("--" + key.replace("_", "-"), dest="p_" + key, type=kind, metavar=key.upper())
    for f in fields(QuadratureConfig):
        ap.add_argument("--" + f.name.replace("_", "-"), dest="q_" + f.name, type=type(f.default),
                        metavar=f.name.upper())
    ap.add_argument("--opt", action="append", default=[], metavar="KEY=VALUE",
                    help="subcommand option; VALUE is read as JSON when possible")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out")
    return ap


def _reject_unknown(d, allowed, path):
    if not isinstance(d, dict):
        raise ValidationError(f"{path} must be an object")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ValidationError(f"unknown key(s) {', '.join(path + '.' + k if path else k for k in extra)}")


def _coerce(value, default, path):
    if default is None or value is None:
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise TypeError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
        if isinstance(default, list):
            return [float(v) for v in value]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ValidationError(f"{path}: expected {type(default).__name__}, got {value!r}") from None
    return value


def _opt_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config(argv):
    """RunConfig from command-line arguments (and the file they name)."""
    args = _parser().parse_args(argv)
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read configuration {args.config}: {exc}") from None
        _reject_unknown(data, TOP_KEYS, "")
        if data.get("subcommand", args.subcommand) != args.subcommand:
            raise ValidationError(f"subcommand: file says {data['subcommand']!r}, "
                                  f"command line says {args.subcommand!r}")
    sub = args.subcommand
    overrides = []

    def merge(section, allowed, prefix):
        d = dict(data.get(section) or {})
        _reject_unknown(d, allowed, section)
        for key in allowed:
            val = getattr(args, prefix + key, None)
            if val is not None:
                if key in d and d[key] != val:
                    overrides.append({"key": f"{section}.{key}", "file": d[key], "flag": val})
                d[key] = val
        return d

    pd = merge("params", PARAM_KEYS, "p_")
    for req in ("n", "s"):
        if req not in pd:
            raise ValidationError(f"params.{req} is required")
    smalls = {k: pd[k] for k in ("sigma", "delta", "epsilon", "alpha_w", "a_inner", "nu") if k in pd}
    params = make_params(pd["n"], pd["s"], pd.get("k", 1), pd.get("t0", 10.0), pd.get("direction", "forward"),
                         smalls)
    qnames = [f.name for f in fields(QuadratureConfig)]
    qd = merge("quadrature", qnames, "q_")
    defaults = QuadratureConfig()
    cfg = QuadratureConfig(**{k: _coerce(v, getattr(defaults, k), f"quadrature.{k}") for k, v in qd.items()})

    base = OPTION_DEFAULTS[sub]
    od = dict(data.get("options") or {})
    _reject_unknown(od, base, "options")
    for item in args.opt:
        if "=" not in item:
            raise ValidationError(f"--opt expects KEY=VALUE, got {item!r}")
        key, text = item.split("=", 1)
        if key not in base:
            raise ValidationError(f"unknown key options.{key}")
        val = _opt_value(text)
        if key in od and od[key] != val:
            overrides.append({"key": f"options.{key}", "file": od[key], "flag": val})
        od[key] = val
    options = {k: _coerce(od.get(k, v), v, f"options.{k}") for k, v in base.items()}

    seed = args.seed if args.seed is not None else data.get("seed", 0)
    workers = args.workers if args.workers is not None else data.get("workers", 1)
    for name, val in (("seed", seed), ("workers", workers)):
        if not isinstance(val, int) or isinstance(val, bool):
            raise ValidationError(f"{name} must be an integer, got {val!r}")
    if workers < 1:
        raise ValidationError("workers must be at least 1")
    if args.out is not None and data.get("out_dir") not in (None, args.out):
        overrides.append({"key": "out_dir", "file": data.get("out_dir"), "flag": args.out})
    out_dir = args.out or os.environ.get(ENV_OUT) or data.get("out_dir")
    return RunConfig(sub, params, cfg, options, seed, workers, out_dir, overrides)


# ---------------------------------------------------------------- emission

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


class _Out:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def json(self, name, obj):
        path = self.root / name
        path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
        self.files.append(name)
        return path

    def csv(self, name, header, rows):
        path = self.root / name
        lines = [",".join(header)]
        for row in rows:
            lines.append(",".join(v if isinstance(v, str) else f"{float(v):.17g}" for v in row))
        path.write_text("\n".join(lines) + "\n")
        self.files.append(name)
        return path

    def track(self, *names):
        self.files.extend(names)


# ---------------------------------------------------------------- subcommands

def _c(params, cfg):
    from .param_dynamics import matching_constant
    return float(matching_constant(params, cfg))


def run_constants(rc, out):
    from . import checks
    from .frac_core import bubble_alpha, eigenpair_unstable
    from .param_dynamics import alpha_exponents, beta_coefficients
    P, cfg = rc.params, rc.cfg
    m = checks.matching(P, cfg)
    mu0, _ = eigenpair_unstable(P, replace(cfg, n_radial=min(cfg.n_radial, 1024)))
    rows = [("alpha_ns", "", bubble_alpha(P, cfg)), ("c", "", m["c"]), ("c_alt", "", m["c_alt"]),
            ("mu0", "", mu0)]
    if P.k >= 2:
        for j, (a, b) in enumerate(zip(alpha_exponents(P), beta_coefficients(P, m["c"])), start=1):
            rows += [("alpha", str(j), a), ("beta", str(j), b)]
    out.csv("constants.csv", ["name", "j", "value"], [(n, j, v) for n, j, v in rows])
    out.json("constants.json", {"matching": m})
    return {"3": m["passed"]}


def run_profile(rc, out):
    from . import checks
    from .frac_core import bubble_profile, dilation_mode, eigenpair_unstable, radial_grid
    P, cfg = rc.params, rc.cfg
    b = checks.bubble_residual(P, cfg, rc.options["n_points"])
    k = checks.l0_kernel(P, cfg)
    ecfg = replace(cfg, n_radial=1024)
    _, z0 = eigenpair_unstable(P, ecfg)
    r = radial_grid(ecfg)
    out.csv("profile.csv", ["r", "U", "Z_np1", "Z0"],
            zip(r, bubble_profile(r, P, cfg), dilation_mode(r, P, cfg), z0.values))
    b.pop("elapsed_s")
    out.json("profile.json", {"bubble": b, "kernel": k})
    return {"1": b["passed"], "2": k["passed"]}


def run_param_ode(rc, out):
    from . import checks
    from .param_dynamics import integrate_reduced_ode, mu0_trajectory
    P, o = rc.params, rc.options
    c = _c(P, rc.cfg)
    tr = checks.trajectory(P, c, o["t_start"], o["t_end"], o["n_times"], o["perturb"],
                           fit_window=(o["t_end"] / 10, o["t_end"]))
    sign = 1.0 if P.forward else -1.0
    init = mu0_trajectory(P, c, sign * o["t_start"])
    ts = sign * np.geomspace(o["t_start"], o["t_end"], o["n_times"])
    path = integrate_reduced_ode(P, c, init, sign * o["t_start"], sign * o["t_end"], times=ts)
    path.to_csv(out.root / "param_path.csv")
    out.track("param_path.csv", "param_path.json")
    tr.pop("elapsed_s")
    out.json("param_ode.json", tr)
    return {"4": tr["passed"]}


def run_ansatz(rc, out):
    from . import checks
    from .ansatz import AnsatzGrid, correction_phibar, residual_S, ustar_field
    P, cfg, o = rc.params, rc.cfg, rc.options
    if P.k < 2:
        raise ValidationError("the ansatz subcommand needs k >= 2")
    c = _c(P, cfg)
    grid = AnsatzGrid(per_decade=o["per_decade"])
    phibar = correction_phibar(P, cfg, c)
    sign = 1.0 if P.forward else -1.0
    for i, t in enumerate(o["times"]):
        fld = ustar_field(sign * t, P, c, cfg, phibar=phibar, grid=grid)
        residual_S(fld, P, c, cfg)
        name = f"ansatz_{i:02d}.csv"
        fld.to_csv(out.root / name)
        out.track(name, name.replace(".csv", ".json"))
    sol = checks.solvability(P, c, cfg, times=o["times"])
    geo = checks.tower_geometry(P, c, cfg, t=sign * o["t"], times=o["times"], grid=grid, phibar=phibar)
    out.json("structure.json", {"solvability": sol, "structure": geo})
    return {"5": sol["passed"], "6": geo["passed"]}


def run_kernel_check(rc, out):
    from . import checks
    from .kernel_engine import GridSpec
    P, cfg, o = rc.params, rc.cfg, rc.options
    c = _c(P, cfg)
    grid = GridSpec(o["per_region"], o["t_lo"], o["t_hi"], o["t_per_decade"])
    cases = None if o["case"] == "suite" else [(o["case"], o["case_params"])]
    res = checks.kernel_suite(P, c, cfg, grid, rc.workers, cases)
    for i, rep in enumerate(res.pop("reports")):
        rep.to_csv(out.root / f"bound_{i:02d}.csv")
        rep.to_json(out.root / f"bound_{i:02d}.json")
        out.track(f"bound_{i:02d}.csv", f"bound_{i:02d}.json")
    res.pop("elapsed_s")
    out.json("kernel_check.json", res)
    return {"7": res["passed"]} if cases is None else {}


def run_evolve(rc, out):
    from . import checks
    from .evolution import EvolveOptions, evolve_semilinear, fit_tower_scales, shoot_tower
    from .frac_core import RadialFunction, bubble_function
    P, o = rc.params, rc.options
    ecfg = checks.evolution_grid(rc.cfg, o["n_radial"], o["r_min"], o["r_max"])
    mode = o["mode"]
    summary = {"mode": mode, "blowup": None}
    checks_out = {}
    if mode in ("steady", "perturbed"):
        U = bubble_function(P, ecfg)
        amp = 1.0 if mode == "steady" else o["amplitude"]
        u0 = RadialFunction(U.radii, amp * U.values, U.tail_exponent, amp * U.value_at_zero)
        try:
            states = evolve_semilinear(u0, o["t_start"], o["t_end"], P, ecfg,
                                       EvolveOptions(n_snapshots=o["n_snapshots"],
                                                     ceiling_factor=o["ceiling_factor"]))
        except BlowupDetected as exc:
            states = exc.snapshots
            summary["blowup"] = {"t": exc.t, "sup": exc.sup, "message": str(exc)}
        if mode == "steady":
            drift = max(float(np.max(np.abs(st.u.values - U.values))) for st in states)
            summary["steady_drift"] = drift
    elif mode == "tower":
        c = _c(P, rc.cfg)
        track = shoot_tower(P, c, o["t_start"], o["t_end"], ecfg, n_snapshots=o["n_snapshots"])
        states = track.snapshots
        summary["tower"] = track.to_dict()
    else:
        raise ValidationError(f"options.mode must be steady, perturbed or tower, got {mode!r}")
    summary["snapshots"] = []
    for i, st in enumerate(states):
        name = f"snapshot_{i:03d}.csv"
        out.csv(name, ["r", "u"], zip(st.u.radii, st.u.values))
        fit = None
        try:
            fit = fit_tower_scales(st.u, P.k, P, ecfg).tolist()
        except ArtifactError:
            pass
        summary["snapshots"].append({"file": name, "t": st.t, "steps": st.step_count, "dt": st.dt,
                                     "energy": st.energy, "mu_hat": fit})
    out.json("trajectory.json", summary)
    return checks_out


def run_inner(rc, out):
    from . import checks
    from .evolution import InnerSpec, inner_cauchy_solve
    P, o = rc.params, rc.options
    icfg = replace(rc.cfg, n_radial=o["n_radial"], r_min=o["r_min"])
    a = P.a_inner if o["a"] is None else float(o["a"])
    nu = P.nu if o["nu"] is None else float(o["nu"])
    if not math.isfinite(a):
        raise ValidationError("the inner problem needs a decay exponent a in (2s, n-2s)")
    P = replace(P, a_inner=a, nu=nu)
    h = checks.manufactured_source(P, o["R"], icfg, a, nu)
    res = inner_cauchy_solve(InnerSpec(o["R"], o["tau0"], h, a, nu, tau1=o["tau1"], n_steps=o["n_steps"]), P, icfg)
    rows = [(t, float(np.max(np.abs(row))), float(np.max(abs(t) ** nu * (1 + res.radii) ** a * np.abs(row))))
            for t, row in zip(res.taus, res.phi)]
    out.csv("inner.csv", ["tau", "sup_phi", "weighted_sup_phi"], rows)
    ref = checks.inner_problem(P, icfg, o["R"], o["tau0"], o["tau1"], o["n_steps"])
    out.json("inner.json", {"e0": res.e0, "mu0": res.mu0, "weighted_sup": res.weighted_sup,
                            "h_norm": res.h_norm, "constant": res.constant, "e0_constant": res.e0_constant,
                            "orthogonality": res.orthogonality, "refinement": ref})
    return {}


DISPATCH = {"constants": run_constants, "profile": run_profile, "param-ode": run_param_ode,
            "ansatz": run_ansatz, "kernel-check": run_kernel_check, "evolve": run_evolve,
            "inner": run_inner}


def versions():
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "bubbletower": __version__}


def dispatch(rc):
    """Run a configuration; returns (exit code, manifest)."""
    root = rc.out_dir or os.path.join("runs", rc.subcommand)
    out = _Out(root)
    start = time.perf_counter()
    manifest = {"config": rc.to_dict(), "overrides": rc.overrides, "versions": versions()}
    code, error, checks_ = EXIT_OK, None, {}
    try:
        checks_ = DISPATCH[rc.subcommand](rc, out)
    except HypothesisViolated as exc:
        code, error = EXIT_HYPOTHESIS, exc
    except ValidationError as exc:
        code, error = EXIT_VALIDATION, exc
    except ArtifactError as exc:
        code, error = EXIT_NUMERICAL, exc
    manifest.update({
        "status": "ok" if code == EXIT_OK else "failed",
        "error": None if error is None else {"type": type(error).__name__, "message": str(error)},
        "outputs": sorted(set(out.files)),
        "partial": code != EXIT_OK and bool(out.files),
        "acceptance": {k: bool(v) for k, v in checks_.items()},
        "wall_time_s": time.perf_counter() - start,
    })
    (out.root / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    return code, manifest


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        rc = parse_config(argv)
    except HypothesisViolated as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    code, manifest = dispatch(rc)
    if manifest["error"]:
        print(f"error ({manifest['error']['type']}): {manifest['error']['message']}", file=sys.stderr)
    else:
        print(json.dumps({"outputs": manifest["outputs"], "acceptance": manifest["acceptance"]}, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
