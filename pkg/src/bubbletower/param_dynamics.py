"""Scale parameters of the tower: rates, prefactors, trajectories and the linearised system."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .errors import (DecayViolated, DegenerateFit, IntegralDivergence, OrderingLost,
                     StepUnderflow, ValidationError)
from .frac_core import (QuadratureConfig, bubble_alpha, bubble_profile, dilation_mode,
                        potential, radial_grid, radial_integral)


def _require_tower(params):
    if not params.n > 6 * params.s:
        raise ValidationError(f"rates need n > 6s, got n={params.n}, s={params.s}")


def alpha_exponents(params):
    """Decay rates alpha_1..alpha_k of the scales, alpha_1 = 0."""
    if params.k == 1:
        return np.zeros(1)
    _require_tower(params)
    n, s = params.n, params.s
    ratio = (n - 2 * s) / (n - 6 * s)
    return np.array([(ratio ** (j - 1) - 1) / (2 * s) for j in range(1, params.k + 1)])


@dataclass(frozen=True)
class MatchingConstant:
    c: float
    c_alt: float
    discrepancy: float

    def __float__(self):
        return self.c


def matching_constant(params, cfg=None):
    """c from the U^p moment and, independently, from the potential moment of Z_{n+1}."""
    cfg = cfg or QuadratureConfig()
    n, s, p = params.n, params.s, params.p
    r = radial_grid(cfg)
    g = params.scaling_dim
    u0 = bubble_alpha(params, cfg)
    U = bubble_profile(r, params, cfg)
    Z = dilation_mode(r, params, cfg)
    mass = radial_integral(U ** p, r, n, -(n + 2 * s), u0 ** p)
    znorm = radial_integral(Z * Z, r, n, -4 * g, (g * u0) ** 2)
    moment = radial_integral(potential(r, params, cfg) * Z, r, n, -4 * s - 2 * g,
                             potential(0.0, params, cfg) * g * u0)
    c = u0 * g * mass / znorm
    c_alt = -u0 * moment / znorm
    if not (np.isfinite(c) and c > 0):
        raise IntegralDivergence(f"matching constant quadrature failed: c={c}")
    return MatchingConstant(float(c), float(c_alt), float(abs(c - c_alt) / abs(c)))


def beta_coefficients(params, c):
    """Prefactors with beta_1 = 1 and the recursion fixed by the reduced ODE."""
    if params.k > 1:
        _require_tower(params)
    c = float(c)
    if not c > 0:
        raise ValidationError(f"c must be positive, got {c}")
    n, s = params.n, params.s
    al = alpha_exponents(params)
    beta = np.ones(params.k)
    for j in range(1, params.k):
        beta[j] = (al[j] / c) ** (2 / (n - 6 * s)) * beta[j - 1] ** ((n - 2 * s) / (n - 6 * s))
    return beta


@dataclass
class TowerScales:
    t: float
    mu0: np.ndarray
    mu1: np.ndarray
    lam: np.ndarray
    mu_bar: np.ndarray

    @property
    def mu(self):
        return self.mu0 + self.mu1

    @property
    def k(self):
        return len(self.mu0)

    def ordered(self):
        return bool(np.all(np.diff(self.mu) < 0))

    def in_regime(self, sigma):
        """|mu_1j| <= mu_0j |t|^(-sigma), reported rather than enforced."""
        return bool(np.all(np.abs(self.mu1) <= self.mu0 * abs(self.t) ** -sigma))


def make_scales(t, mu0, mu1=None, delta=0.01):
    mu0 = np.asarray(mu0, dtype=float)
    mu1 = np.zeros_like(mu0) if mu1 is None else np.asarray(mu1, dtype=float)
    mu = mu0 + mu1
    lam = np.zeros_like(mu)
    lam[1:] = mu[1:] / mu[:-1]
    mu_bar = np.zeros(len(mu) + 1)
    mu_bar[0] = abs(t) ** delta
    mu_bar[1:-1] = np.sqrt(mu[1:] * mu[:-1])
    return TowerScales(float(t), mu0, mu1, lam, mu_bar)


def _check_time(params, t):
    if params.forward and not t > 0:
        raise ValidationError(f"forward trajectories live at t > 0, got {t}")
    if not params.forward and not t < 0:
        raise ValidationError(f"ancient trajectories live at t < 0, got {t}")


def mu0_trajectory(params, c, t):
    """Explicit scales beta_j |t|^(-alpha_j) at time t."""
    _check_time(params, t)
    mu0 = beta_coefficients(params, c) * abs(t) ** -alpha_exponents(params)
    return make_scales(t, mu0, delta=params.delta)


def mu0_derivative(params, c, t):
    """d mu_0j / dt along the explicit trajectory."""
    _check_time(params, t)
    al = alpha_exponents(params)
    mu0 = beta_coefficients(params, c) * abs(t) ** -al
    # |t|^(-a) has derivative -a mu/t for t > 0 and a mu/|t| for t < 0
    return -al * mu0 / t


def reduced_ode_rhs(params, c, mu):
    """Right side of mu_j^(2s-1) mu_j' = -+ c lambda_j^((n-2s)/2), mu_1 frozen."""
    mu = np.asarray(mu, dtype=float)
    g = params.scaling_dim
    sign = -1.0 if params.forward else 1.0
    out = np.zeros_like(mu)
    out[1:] = sign * c * (mu[1:] / mu[:-1]) ** g * mu[1:] ** (1 - 2 * params.s)
    return out


@dataclass
class ParamPath:
    times: np.ndarray
    states: list
    derivatives: np.ndarray
    meta: dict = field(default_factory=dict)

    def mu(self):
        return np.array([st.mu for st in self.states])

    def mu1(self):
        return np.array([st.mu1 for st in self.states])

    def fits(self, window=None):
        """Power-law fit of each mu_j over `window` (default: the last decade)."""
        tt = np.abs(self.times)
        lo, hi = window or (tt.max() / 10, tt.max())
        sel = (tt >= lo * (1 - 1e-12)) & (tt <= hi * (1 + 1e-12))
        out = []
        mu = self.mu()
        for j in range(mu.shape[1]):
            try:
                e, a, r2 = fit_power_law(tt[sel], mu[sel, j])
                out.append({"exponent": e, "prefactor": a, "r2": r2})
            except (DegenerateFit, ValidationError) as exc:
                out.append({"exponent": None, "prefactor": None, "r2": None, "error": str(exc)})
        return out

    def to_csv(self, path):
        path = Path(path)
        k = len(self.states[0].mu0)
        head = ([f"mu0{j}" for j in range(1, k + 1)] + [f"mu1{j}" for j in range(1, k + 1)]
                + [f"dmu{j}" for j in range(1, k + 1)])
        lines = [",".join(["t"] + head)]
        for t, st, d in zip(self.times, self.states, self.derivatives):
            row = [t, *st.mu0, *st.mu1, *d]
            lines.append(",".join(f"{v:.17g}" for v in row))
        path.write_text("\n".join(lines) + "\n")
        summary = {"fits": self.fits(), "meta": self.meta}
        path.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def integrate_reduced_ode(params, c, init, t0, t1, cfg=None, n_out=200, times=None, rtol=None):
    """Adaptive embedded Runge-Kutta integration of the reduced scale system.

    Works in log|t| and log mu, where the explicit solution is a straight
    line; the same code integrates both directions since only the sign of
    the right side changes.  mu_1 stays at its initial value.
    """
    cfg = cfg or QuadratureConfig()
    if params.forward and not t1 > t0 > 0:
        raise ValidationError("forward integration needs 0 < t0 < t1")
    if not params.forward and not t1 < t0 < 0:
        raise ValidationError("ancient integration needs t1 < t0 < 0")
    mu_init = np.asarray(init.mu, dtype=float)
    if not np.all(mu_init > 0) or not np.all(np.diff(mu_init) < 0):
        raise ValidationError("initial scales must be positive and strictly decreasing")
    # DOP853's local estimate is optimistic on the innermost scale; 1e-10 leaves ~1e-6 there
    rtol = min(cfg.tol, 1e-12) if rtol is None else rtol
    g, s2 = params.scaling_dim, 2 * params.s
    c = float(c)
    k = len(mu_init)

    def rhs(x, y):
        dy = np.zeros_like(y)
        # d log mu_j / d log tau = -c tau lambda_j^g mu_j^(-2s), tau = |t|
        dy[1:] = -c * np.exp(x + g * (y[1:] - y[:-1]) - s2 * y[1:])
        return dy

    events = []
    for j in range(1, k):
        ev = (lambda x, y, j=j: y[j - 1] - y[j])
        ev.terminal = True
        ev.direction = -1
        events.append(ev)
    x0, x1 = math.log(abs(t0)), math.log(abs(t1))
    if times is None:
        xs = np.linspace(x0, x1, n_out)
    else:
        xs = np.log(np.abs(np.asarray(times, dtype=float)))
    sol = solve_ivp(rhs, (x0, x1), np.log(mu_init), method="DOP853", t_eval=xs,
                    rtol=rtol, atol=rtol, events=events or None)
    if sol.status == -1:
        raise StepUnderflow(f"reduced ODE integration failed: {sol.message}")
    if sol.status == 1:
        xe = min(float(e[0]) for e in sol.t_events if len(e))
        sign = 1.0 if params.forward else -1.0
        raise OrderingLost(f"scale ordering lost at t={sign * math.exp(xe):.6g}",
                           t=sign * math.exp(xe))
    sign = 1.0 if params.forward else -1.0
    tt = sign * np.exp(sol.t)
    states, ders = [], []
    for t, y in zip(tt, sol.y.T):
        mu = np.exp(y)
        st = make_scales(t, mu, delta=params.delta)
        if not st.ordered():
            raise OrderingLost(f"scale ordering lost at t={t:.6g}", t=t)
        states.append(st)
        ders.append(reduced_ode_rhs(params, c, mu))
    return ParamPath(tt, states, np.array(ders), {"solver": "DOP853", "rtol": rtol,
                                                   "nfev": int(sol.nfev)})


def fit_power_law(t, y):
    """Least squares of log y on log t: returns (exponent, prefactor, r2), y ~ prefactor t^-exponent."""
    t = np.abs(np.asarray(t, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(t) < 8 or len(t) != len(y):
        raise ValidationError("power-law fit needs at least 8 paired samples")
    if np.any(y <= 0) or np.any(t <= 0):
        raise ValidationError("power-law fit needs positive samples")
    lx, ly = np.log(t), np.log(y)
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    # a constant series has nothing to explain; guard against round-off in ss_tot
    r2 = 1.0 if ss_tot <= 1e-24 * len(ly) or ss_res <= 1e-20 * max(ss_tot, 1e-300) else 1 - ss_res / ss_tot
    if r2 < 0.9:
        raise DegenerateFit(f"power-law fit has r2={r2:.3f} < 0.9")
    return float(-slope), float(math.exp(icpt)), float(r2)


def weighted_sup_norm(t, g, b):
    """sup over samples of |t^b g(t)|."""
    t = np.abs(np.asarray(t, dtype=float))
    g = np.asarray(g, dtype=float)
    if g.size == 0:
        return 0.0
    return float(np.max(np.abs(t ** b * g)))


def mu1_norm(path, params):
    al = alpha_exponents(params)
    mu1 = path.mu1()
    total = 0.0
    for i in range(mu1.shape[1]):
        total += weighted_sup_norm(path.times, path.derivatives[:, i], 1 + al[i] + params.sigma)
        total += weighted_sup_norm(path.times, mu1[:, i], al[i] + params.sigma)
    return total


def _log_spline(x, vals):
    return CubicSpline(x, vals).antiderivative()


def solve_linearized_params(M, params, c, t0, t_max, cfg=None, bounds=None, per_decade=96):
    """The fixed-point map of the linearised scale system evaluated on given sources M_j.

    mu_11(t) = int_t^inf M_1, and for j >= 2 the variation-of-constants
    integral from t0 driven by M_j and the previous component.  The upper
    improper integral is cut at time_trunc_factor*t and closed by a power law
    at the local decay rate of M_1, floored at t^(-1-alpha_1-sigma).
    """
    cfg = cfg or QuadratureConfig()
    _require_tower(params)
    if not t_max > t0 > 0:
        raise ValidationError("need 0 < t0 < t_max")
    if len(M) != params.k:
        raise ValidationError(f"expected {params.k} source functions, got {len(M)}")
    n, s, sig = params.n, params.s, params.sigma
    al = alpha_exponents(params)
    beta = beta_coefficients(params, c)
    T = cfg.time_trunc_factor
    x0, x1 = math.log(t0), math.log(t_max * T)
    nx = int(math.ceil((x1 - x0) / math.log(10) * per_decade)) + 1
    x = np.linspace(x0, x1, nx)
    tt = np.exp(x)
    out_sel = tt <= t_max * (1 + 1e-12)
    dec = 1 + al + sig
    Mv = [np.asarray(Mj(tt), dtype=float) * np.ones_like(tt) for Mj in M]
    for j in range(params.k):
        scaled = tt ** dec[j] * np.abs(Mv[j])
        if bounds is not None and np.max(scaled) > bounds[j] * (1 + 1e-9):
            raise DecayViolated(f"|t^{dec[j]:.4g} M_{j + 1}| reaches {np.max(scaled):.4g} "
                                f"above the declared bound {bounds[j]:.4g}")
        tail = scaled[-max(3, nx // 4):]
        head = scaled[: -max(3, nx // 4)]
        if np.max(tail) > 2 * max(np.max(head), 1e-300) and np.max(tail) > 0:
            raise DecayViolated(f"M_{j + 1} decays slower than t^-{dec[j]:.4g}")
    kap = (n - 6 * s + 2) / 2
    g = (n - 2 * s) / 2
    mu1 = np.zeros((params.k, nx))
    dmu1 = np.zeros((params.k, nx))
    # j = 1: integral from t to T t plus the power-law remainder
    A = _log_spline(x, tt * Mv[0])
    upper = x + math.log(T)
    ok = upper <= x1 + 1e-12
    rem = np.zeros(nx)
    tT = tt[ok] * T
    # tail closed with the local decay rate of M_1, never slower than the admissible one
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = -np.gradient(np.log(np.abs(Mv[0])), x)
    q = np.where(np.isfinite(slope) & (slope > dec[0]), slope, dec[0])
    rem[ok] = np.interp(np.log(tT), x, Mv[0]) * tT / (np.interp(np.log(tT), x, q) - 1)
    mu1[0, ok] = A(upper[ok]) - A(x[ok]) + rem[ok]
    dmu1[0] = -Mv[0]
    xo, to = x[ok], tt[ok]
    for j in range(1, params.k):
        lam0 = beta[j] / beta[j - 1] * to ** -(al[j] - al[j - 1])
        drive = g * al[j] / to * lam0 * mu1[j - 1, ok] + Mv[j][ok]
        A = _log_spline(xo, to ** (kap * al[j] + 1) * drive)
        mu1[j, ok] = to ** (-kap * al[j]) * (A(xo) - A(x0))
        dmu1[j, ok] = -kap * al[j] / to * mu1[j, ok] + drive
    sel = out_sel & ok
    times = tt[sel]
    mu0 = beta[None, :] * times[:, None] ** -al[None, :]
    states = [make_scales(t, m0, m1, params.delta) for t, m0, m1 in zip(times, mu0, mu1[:, sel].T)]
    path = ParamPath(times, states, dmu1[:, sel].T, {"truncation_factor": T})
    path.meta["ode_residual"] = linearized_residual(path, params, c, M)
    if path.meta["ode_residual"] > 10 * cfg.tol:
        raise IntegralDivergence(f"linearised solution misses its ODE by {path.meta['ode_residual']:.3e}")
    return path


def linearized_residual(path, params, c, M):
    """Relative residual of the linearised system using differentiated samples.

    The time derivative is taken from a spline of the computed mu_1 (not from
    the stored right side), so this is an independent check of the integrals.
    The first component solves mu_11' = -M_1, the sign carried by its
    integral representation.
    """
    al = alpha_exponents(params)
    beta = beta_coefficients(params, c)
    n, s = params.n, params.s
    kap = (n - 6 * s + 2) / 2
    g = (n - 2 * s) / 2
    tt = path.times
    if len(tt) < 8:
        return 0.0
    x = np.log(tt)
    mu1 = path.mu1()
    worst = 0.0
    inner = slice(2, -2)
    for j in range(params.k):
        d = CubicSpline(x, mu1[:, j])(x, 1) / tt
        Mj = np.asarray(M[j](tt), dtype=float) * np.ones_like(tt)
        if j == 0:
            res = d + Mj
            scale = np.abs(d) + np.abs(Mj)
        else:
            lam0 = beta[j] / beta[j - 1] * tt ** -(al[j] - al[j - 1])
            a = kap * al[j] / tt * mu1[:, j]
            b = g * al[j] / tt * lam0 * mu1[:, j - 1]
            res = d + a - b - Mj
            scale = np.abs(d) + np.abs(a) + np.abs(b) + np.abs(Mj)
        # interior samples only: spline end conditions are not part of the check
        r, sc = res[inner], scale[inner]
        if sc.size and np.max(sc) > 0:
            worst = max(worst, float(np.max(np.abs(r) / np.maximum(sc, 1e-300 + 1e-12 * np.max(sc)))))
    return worst
