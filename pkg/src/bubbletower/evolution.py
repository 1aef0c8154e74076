"""Radial semilinear fractional heat flow, scale fitting, and the inner linear problem."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import integrate, linalg

from .ansatz import CutoffSpec, Dj_term, Mu1State, bubble_sign, cutoff, mu1_state_at
from .errors import (BlowupDetected, FitFailed, OrthogonalityViolated, StepUnderflow,
                     UnstableGrowth, ValidationError)
from .frac_core import (QuadratureConfig, RadialFunction, bubble_alpha, dilation_mode,
                        eigenpair_unstable, laplacian_matrix, origin_value, potential, radial_grid, radial_integral)
from .param_dynamics import ParamPath, matching_constant, mu0_derivative, mu0_trajectory
from .quadrature import gauss_legendre, panel_nodes, sphere_area


# ---------------------------------------------------------------- semilinear flow

@dataclass
class EvolutionState:
    t: float
    u: RadialFunction
    step_count: int
    dt: float
    energy: float = float("nan")
    event: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.u.values)):
            raise ValidationError(f"non-finite solution at t={self.t}")
        if not self.dt > 0:
            raise ValidationError("dt must be positive")


@dataclass(frozen=True)
class EvolveOptions:
    n_snapshots: int = 8
    ceiling_factor: float = 1e6
    nonlinear: bool = True
    dt_initial: Optional[float] = None
    max_steps: int = 200_000
    dt_min: float = 1e-13
    stop_when: Optional[Callable] = None


def _f(u, p):
    return np.abs(u) ** (p - 1) * u


def snapshot_times(t0, t1, n):
    """Log-spaced in |t| when t0 and t1 share a sign and neither is 0, else uniform."""
    if t0 > 0:
        return np.geomspace(t0, t1, n + 1)
    if t1 < 0:
        return -np.geomspace(-t0, -t1, n + 1)
    return np.linspace(t0, t1, n + 1)


def energy(u, params, cfg, A=None):
    """J(u) = 1/2 int u (-Delta)^s u - int |u|^(p+1)/(p+1) on the grid."""
    n, s, p = params.n, params.s, params.p
    r = radial_grid(cfg)
    vals = u(r) if callable(u) else np.asarray(u, dtype=float)
    q = u.tail_exponent if isinstance(u, RadialFunction) else 2 * s - n
    if A is None:
        A = laplacian_matrix(params, cfg, q)
    quad = radial_integral(vals * (A @ vals), r, n, 2 * q - 2 * s, truncate=True)
    pot = radial_integral(np.abs(vals) ** (p + 1), r, n, (p + 1) * q, truncate=True)
    return 0.5 * quad - pot / (p + 1)


class _Stepper:
    """Backward Euler for the linear part, explicit nonlinearity, cached factorizations."""

    def __init__(self, A, p, nonlinear):
        self.A = A
        self.p = p
        self.nonlinear = nonlinear
        self.cache = {}

    def _lu(self, dt):
        key = float(dt)
        if key not in self.cache:
            if len(self.cache) > 48:
                self.cache.clear()
            self.cache[key] = linalg.lu_factor(np.eye(len(self.A)) + dt * self.A)
        return self.cache[key]

    def step(self, u, dt):
        rhs = u + dt * _f(u, self.p) if self.nonlinear else u
        return linalg.lu_solve(self._lu(dt), rhs)

    def doubled(self, u, dt):
        """Richardson-extrapolated step and its error estimate."""
        full = self.step(u, dt)
        half = self.step(self.step(u, 0.5 * dt), 0.5 * dt)
        scale = max(np.max(np.abs(half)), 1e-300)
        return 2 * half - full, float(np.max(np.abs(half - full)) / scale)


def evolve_semilinear(u0, t0, t1, params, cfg, options=None):
    """Snapshots of u_t + (-Delta)^s u = |u|^(p-1) u started from u0 at t0.

    The step ladder dt = dt_base 2^m keeps the number of distinct
    factorizations small; steps that land on a snapshot are the exception.
    BlowupDetected carries the snapshots collected so far in `.snapshots`.
    """
    opts = options or EvolveOptions()
    if not t1 > t0:
        raise ValidationError(f"need t1 > t0, got {t0}, {t1}")
    n, s, p = params.n, params.s, params.p
    if not u0.tail_exponent < 0:
        raise ValidationError("initial data must decay")
    q = max(u0.tail_exponent, -(n + 2 * s))
    r = radial_grid(cfg)
    A = laplacian_matrix(params, cfg, q)
    stepper = _Stepper(A, p, opts.nonlinear)
    ceiling = opts.ceiling_factor * bubble_alpha(params, cfg)
    span = t1 - t0
    dt_base = span * 2.0 ** -30
    dt0 = opts.dt_initial or span / 256
    m = max(0, int(round(math.log2(dt0 / dt_base))))
    u = u0(r).astype(float)

    def record(t, steps, dt):
        f = RadialFunction(r, u.copy(), q, origin_value(u, r))
        return EvolutionState(float(t), f, steps, float(dt), energy(u, params, cfg, A))

    states = [record(t0, 0, dt_base * 2.0 ** m)]
    t, steps = t0, 0
    for target in snapshot_times(t0, t1, opts.n_snapshots)[1:]:
        while t < target - 1e-14 * max(1.0, abs(target)):
            dt = dt_base * 2.0 ** m
            landing = t + dt >= target
            if landing:
                dt = target - t
            new, err = stepper.doubled(u, dt)
            if err > cfg.tol:
                m -= 1
                if dt_base * 2.0 ** m < opts.dt_min * max(1.0, abs(t)):
                    raise StepUnderflow(f"step fell below {opts.dt_min:g} at t={t:.6g}")
                continue
            u = new
            t = target if landing else t + dt
            steps += 1
            if err < cfg.tol / 8:
                m += 1
            sup = float(np.max(np.abs(u)))
            if not np.isfinite(sup) or sup > ceiling:
                exc = BlowupDetected(f"sup|u| = {sup:.3e} exceeds {ceiling:.3e} at t={t:.8g}", t, sup)
                exc.snapshots = states
                raise exc
            if steps > opts.max_steps:
                raise StepUnderflow(f"more than {opts.max_steps} steps before t={target:.6g}")
            reason = opts.stop_when(t, u) if opts.stop_when else None
            if reason:
                states.append(record(t, steps, dt_base * 2.0 ** m))
                states[-1].event = str(reason)
                return states
        states.append(record(t, steps, dt_base * 2.0 ** m))
    return states


# ---------------------------------------------------------------- scale fitting

def _sign_changes(r, u):
    """Radii where u changes sign, interpolated linearly in log r."""
    out = []
    for i in np.nonzero(np.sign(u[:-1]) * np.sign(u[1:]) < 0)[0]:
        a, b = u[i], u[i + 1]
        w = a / (a - b)
        out.append(math.exp((1 - w) * math.log(r[i]) + w * math.log(r[i + 1])))
    return out


def _log_minima(r, v):
    """Interior local minima of v, refined by a parabola in log r."""
    out = []
    x = np.log(r)
    for i in range(1, len(v) - 1):
        if v[i] < v[i - 1] and v[i] <= v[i + 1]:
            d2 = v[i - 1] - 2 * v[i] + v[i + 1]
            shift = 0.5 * (v[i - 1] - v[i + 1]) / d2 if d2 > 0 else 0.0
            out.append(math.exp(x[i] + shift * (x[i + 1] - x[i])))
    return out


def fit_tower_scales(u, k, params, cfg=None):
    """Scales mu_1 > ... > mu_k read off a sampled tower.

    The innermost scale comes from the amplitude at the origin; each outer
    one from the crossing radius sqrt(mu_j mu_(j+1)), solved outward.
    Forward towers cross at sign changes, ancient (positive) towers at the
    minima of r^((n-2s)/2) u.  Undetected crossings give NaN.
    """
    g = params.scaling_dim
    alpha = bubble_alpha(params, cfg)
    r = u.radii
    amp = abs(u.value_at_zero)
    if not amp > 0:
        raise FitFailed("zero amplitude at the origin")
    mu = np.full(k, np.nan)
    mu[k - 1] = (amp / alpha) ** (-1 / g)
    if k == 1:
        return mu
    inner = r > 0.5 * mu[k - 1]
    if params.forward:
        cross = _sign_changes(r[inner], u.values[inner])
        if len(cross) < k - 1:
            raise FitFailed(f"found {len(cross)} sign changes, need {k - 1}")
    else:
        cross = _log_minima(r[inner], r[inner] ** g * u.values[inner])
    for i, rc in enumerate(cross[:k - 1]):
        j = k - 2 - i
        mu[j] = rc * rc / mu[j + 1]
    return mu


@dataclass
class TowerTrack:
    """Scales fitted along a tower run tuned against the instability of its innermost bubble."""
    times: np.ndarray
    mu_hat: np.ndarray
    mu_ode: np.ndarray
    seed_bracket: tuple
    tracked_until: float
    exponent: float
    exponent_ode: float
    snapshots: list = field(default_factory=list)

    @property
    def trend_matches(self):
        """The innermost fitted scale moves in the direction of the reduced ODE."""
        d_fit = self.mu_hat[-1, -1] - self.mu_hat[0, -1]
        d_ode = self.mu_ode[-1, -1] - self.mu_ode[0, -1]
        return bool(np.sign(d_fit) == np.sign(d_ode) and d_fit != 0)

    @property
    def exponent_error(self):
        return abs(self.exponent - self.exponent_ode) / abs(self.exponent_ode)

    def to_dict(self):
        return {"times": self.times.tolist(), "mu_hat": self.mu_hat.tolist(),
                "mu_ode": self.mu_ode.tolist(), "seed_bracket": list(self.seed_bracket),
                "tracked_until": self.tracked_until, "exponent": self.exponent,
                "exponent_ode": self.exponent_ode, "trend_matches": self.trend_matches,
                "exponent_error": self.exponent_error}


def tower_initial_data(params, c, t, cfg, phibar=None):
    from .ansatz import correction_phibar, ustar_values
    if phibar is None and params.k > 1:
        phibar = correction_phibar(params, replace(cfg, r_min=1e-4, r_max=1e4, n_radial=1024), c)
    r = radial_grid(cfg)
    bubbles, corr = ustar_values(r, t, params, c, phibar, cfg)
    u = bubbles + corr
    return RadialFunction(r, u, 2 * params.s - params.n, origin_value(u, r))


def shoot_tower(params, c, t0, t1, cfg, phibar=None, iterations=28, n_snapshots=60, agree=1e-3):
    """Evolve u*(., t0) plus e times the unstable mode of the innermost bubble.

    The seed e is bisected between runs whose inner bubble blows up and runs
    where it collapses (origin value halves or changes sign); the two final
    bracketing runs agree up to a time after which neither follows the
    tower, and the scales are fitted on snapshots before it.
    """
    k, g = params.k, params.scaling_dim
    u_star = tower_initial_data(params, c, t0, cfg, phibar)
    r = u_star.radii
    _, z0 = eigenpair_unstable(params, cfg)
    mu_k = mu0_trajectory(params, c, t0).mu0[k - 1]
    mode = bubble_sign(k, params) * mu_k ** -g * z0(r / mu_k)
    amp0 = abs(u_star.value_at_zero)
    sign0 = math.copysign(1.0, u_star.value_at_zero)

    def stop(t, u):
        if sign0 * u[0] < 0.5 * amp0:
            return "collapse"
        return None

    opts = EvolveOptions(n_snapshots=n_snapshots, ceiling_factor=1e3 * amp0 / bubble_alpha(params, cfg),
                         stop_when=stop)

    def run(e):
        u = u_star.values + e * mode
        start = RadialFunction(r, u, u_star.tail_exponent, origin_value(u, r))
        try:
            states = evolve_semilinear(start, t0, t1, params, cfg, opts)
        except BlowupDetected as exc:
            return 1, exc.snapshots
        return (-1 if states[-1].event else 0), states

    lo, hi = -0.05, 0.05
    out_lo, st_lo = run(lo)
    out_hi, st_hi = run(hi)
    if not (out_lo == -1 and out_hi == 1):
        raise FitFailed(f"seed bracket does not separate collapse from blow-up ({out_lo}, {out_hi})")
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        out, st = run(mid)
        if out == 0:
            st_lo = st_hi = st
            lo = hi = mid
            break
        if out == 1:
            hi, st_hi = mid, st
        else:
            lo, st_lo = mid, st
    times, fits = [], []
    for a, b in zip(st_lo, st_hi):
        if abs(a.u.value_at_zero / b.u.value_at_zero - 1) > agree:
            break
        times.append(a.t)
        fits.append(fit_tower_scales(a.u, k, params, cfg))
    if len(times) < 3:
        raise FitFailed("the tuned runs separate before three snapshots")
    times = np.array(times)
    fits = np.array(fits)
    ode = np.array([mu0_trajectory(params, c, t).mu0 for t in times])
    lt = np.log(np.abs(times))
    exponent = float(np.polyfit(lt, np.log(fits[:, -1]), 1)[0])
    exponent_ode = float(np.polyfit(lt, np.log(ode[:, -1]), 1)[0])
    return TowerTrack(times, fits, ode, (lo, hi), float(times[-1]), exponent, exponent_ode, st_lo[:len(times)])


# ---------------------------------------------------------------- inner Cauchy problem

@dataclass
class InnerSpec:
    """Source h(y, tau) on B_{8R}; tau runs over [tau0, tau1] (ancient: [tau1, tau0], tau < 0)."""
    R: float
    tau0: float
    h: Callable
    a: float
    nu: float
    tau1: Optional[float] = None
    n_steps: int = 400
    direction: str = "forward"
    e0: Optional[float] = None

    def __post_init__(self):
        if not self.R >= 16:
            raise ValidationError(f"inner radius factor must be at least 16, got {self.R}")
        if self.direction not in ("forward", "ancient"):
            raise ValidationError(f"unknown direction {self.direction!r}")
        if self.nu < 0:
            raise ValidationError("nu must be non-negative")
        if self.n_steps < 4:
            raise ValidationError("need at least 4 time steps")


@dataclass
class InnerResult:
    radii: np.ndarray
    taus: np.ndarray
    phi: np.ndarray
    e0: float
    mu0: float
    weighted_sup: float
    h_norm: float
    orthogonality: float
    meta: dict = field(default_factory=dict)

    @property
    def constant(self):
        return self.weighted_sup / self.h_norm if self.h_norm > 0 else 0.0

    @property
    def e0_constant(self):
        return abs(self.e0) / self.h_norm if self.h_norm > 0 else 0.0


def _ball_weights(r, n):
    """Trapezoid weights in log r for integrals over the ball of radius r[-1]."""
    h = math.log(r[1] / r[0])
    w = sphere_area(n) * h * r ** n
    w[0] *= 0.5
    w[-1] *= 0.5
    w[0] += sphere_area(n) * r[0] ** n / n
    return w


def _top_eigen(L):
    """Largest real eigenvalue of L with right and left eigenvectors, <left, right> = 1."""
    vals, left, right = linalg.eig(L, left=True, right=True)
    i = int(np.argmax(vals.real))
    lam = float(vals[i].real)
    z = right[:, i].real
    z = z / z[int(np.argmax(np.abs(z)))]
    ell = left[:, i].real
    ell = ell / float(ell @ z)
    return lam, z, ell


def inner_grid(R, cfg):
    return replace(cfg, r_max=8 * R)


def orthogonalize(h, R, params, cfg):
    """h minus its Z_{n+1} component on B_{8R}, as a new space-time source."""
    r = radial_grid(inner_grid(R, cfg))
    w = _ball_weights(r, params.n)
    z = dilation_mode(r, params, cfg)
    zz = float(w @ (z * z))

    def proj(y, tau):
        y = np.asarray(y, dtype=float)
        coef = float(w @ (h(r, tau) * z)) / zz
        return h(y, tau) - coef * dilation_mode(y, params, cfg)
    return proj


@dataclass(frozen=True)
class _InnerSystem:
    r: np.ndarray
    w: np.ndarray
    L: np.ndarray
    mu0: float
    z0: np.ndarray
    ell: np.ndarray
    zn: np.ndarray


def _inner_system(R, params, cfg):
    icfg = inner_grid(R, cfg)
    r = radial_grid(icfg)
    # q = -inf zero-extends past 8R
    L = -laplacian_matrix(params, icfg, -math.inf) + np.diag(potential(r, params, cfg))
    mu0, z0, ell = _top_eigen(L)
    return _InnerSystem(r, _ball_weights(r, params.n), L, mu0, z0, ell, dilation_mode(r, params, cfg))


def _unstable_coefficients(sys, hfun, taus, closed):
    """a(tau) = -int_tau^T e^(mu0 (tau - l)) <ell, h(l)> dl on the time grid, T = taus[-1].

    Each interval uses an 8-point Gauss rule.  With closed=False the
    integral runs to infinity with the integrand frozen past T, which
    leaves an e^(-mu0 T) remainder; closed=True stops at T.
    """
    x, wx = gauss_legendre(8)
    mu0 = sys.mu0
    a = np.empty(len(taus))
    a[-1] = 0.0 if closed else -float(sys.ell @ hfun(sys.r, taus[-1])) / mu0
    for m in range(len(taus) - 2, -1, -1):
        lo, hi = taus[m], taus[m + 1]
        nodes = lo + (hi - lo) * x
        qs = np.array([sys.ell @ hfun(sys.r, l) for l in nodes])
        seg = (hi - lo) * float(np.sum(wx * np.exp(mu0 * (lo - nodes)) * qs))
        a[m] = math.exp(-mu0 * (hi - lo)) * a[m + 1] - seg
    return a


def inner_cauchy_solve(spec, params, cfg):
    """phi_tau = -(-Delta)^s phi + p U^(p-1) phi + h on B_{8R}, zero outside.

    Forward: phi(tau0) = e0 Z0 with e0 chosen so that phi stays bounded;
    the Z0 coefficient is carried by its exact Duhamel formula and the rest
    is stepped by Crank-Nicolson.  With spec.e0 given the whole field is
    stepped from that seed and exponential growth is reported.
    Ancient: tau runs from tau1 < tau0 < 0; the stable part starts from 0
    at tau1 and the Z0 coefficient is integrated back from a(tau0) = 0,
    every such choice being bounded as tau -> -infinity.
    """
    n, s = params.n, params.s
    sys = _inner_system(spec.R, params, cfg)
    r, w, L = sys.r, sys.w, sys.L
    forward = spec.direction == "forward"
    if forward:
        if not spec.tau0 > 0:
            raise ValidationError("forward inner problem needs tau0 > 0")
        tau1 = spec.tau1 if spec.tau1 is not None else spec.tau0 + 40.0 / sys.mu0
        if not tau1 > spec.tau0:
            raise ValidationError("need tau1 > tau0")
        taus = np.linspace(spec.tau0, tau1, spec.n_steps + 1)
    else:
        if not spec.tau0 < 0:
            raise ValidationError("ancient inner problem needs tau0 < 0")
        tau1 = spec.tau1 if spec.tau1 is not None else spec.tau0 - 40.0 / sys.mu0
        if not tau1 < spec.tau0:
            raise ValidationError("ancient inner problem needs tau1 < tau0")
        taus = np.linspace(tau1, spec.tau0, spec.n_steps + 1)

    H = np.array([spec.h(r, tau) for tau in taus])
    if not np.all(np.isfinite(H)):
        raise ValidationError("source is not finite on the samples")
    zz = float(w @ (sys.zn ** 2))
    hn = np.sqrt(np.maximum(H ** 2 @ w, 1e-300))
    orth = float(np.max(np.abs(H @ (w * sys.zn)) / (hn * math.sqrt(zz))))
    if np.any(H != 0) and orth > 1e-4:
        raise OrthogonalityViolated(f"source pairs with Z_(n+1) at relative size {orth:.3e}")

    dt = float(taus[1] - taus[0])
    N = len(r)
    I = np.eye(N)
    lu = linalg.lu_factor(I - 0.5 * dt * L)
    explicit = I + 0.5 * dt * L
    tuned = spec.e0 is None or not forward
    e0 = 0.0
    if tuned:
        a = _unstable_coefficients(sys, spec.h, taus, closed=not forward)
        e0 = float(a[0]) if forward else 0.0
        start = float(a[0])
    else:
        e0 = start = float(spec.e0)
    phi = np.empty((len(taus), N))
    phi[0] = start * sys.z0
    for m in range(len(taus) - 1):
        nxt = linalg.lu_solve(lu, explicit @ phi[m] + 0.5 * dt * (H[m] + H[m + 1]))
        if tuned:
            nxt += (a[m + 1] - float(sys.ell @ nxt)) * sys.z0
        phi[m + 1] = nxt
    coef = phi @ sys.ell
    if forward and not tuned:
        _check_growth(taus, coef, sys.mu0)

    tw = np.abs(taus) ** spec.nu
    weighted = float(np.max(tw[:, None] * (1 + r[None, :]) ** spec.a * np.abs(phi)))
    h_norm = float(np.max(tw[:, None] * (1 + r[None, :] ** (2 * s + spec.a)) * np.abs(H)))
    meta = {"tau1": float(tau1), "dt": dt, "n_radial": N,
            "z0_coefficient_range": [float(coef.min()), float(coef.max())]}
    return InnerResult(r, taus, phi, e0, sys.mu0, weighted, h_norm, orth, meta)


def _check_growth(taus, coef, mu0):
    """UnstableGrowth when the Z0 coefficient grows like e^(mu0 tau) over the second half."""
    half = len(taus) // 2
    amp = np.abs(coef[half:])
    if amp[-1] <= 0 or amp[0] <= 0:
        return
    rate = math.log(amp[-1] / amp[0]) / (taus[-1] - taus[half])
    if rate > 0.5 * mu0 and amp[-1] > 10 * amp[0]:
        raise UnstableGrowth(f"Z0 coefficient grows at rate {rate:.3g} (unstable eigenvalue {mu0:.3g})")


# ---------------------------------------------------------------- projections onto Z_(n+1)

def _ball_rule(breaks, n, m=16):
    """Gauss-Legendre nodes and weights of int_{B} f dy = |S^(n-1)| int f y^(n-1) dy."""
    nodes, weights = panel_nodes(breaks, m)
    return nodes, weights * sphere_area(n) * nodes ** (n - 1)


def _default_R(t, params):
    return abs(t) ** params.epsilon


def _zeta_breaks(j, mu_ratio, R, params, k):
    """Panel ends on [0, 8R] at the cut-off transitions and dyadic radii."""
    pts = [0.0, 8 * R]
    pts += [R * mu_ratio, 2 * R * mu_ratio]
    if j < k:
        pts += [mu_ratio / R, 2 * mu_ratio / R]
    pts += list(2.0 ** np.arange(-6, math.log2(8 * R) + 1))
    pts = np.unique(np.clip(pts, 0.0, 8 * R))
    return pts


def _mu1_state(mu1, t):
    if isinstance(mu1, ParamPath):
        return mu1_state_at(mu1, t)
    return mu1


def _resolve_c(params, c):
    return float(matching_constant(params)) if c is None else float(c)


def _zeta_in_y(j, y, t, scales, mu_j, R, params):
    spec = CutoffSpec("zeta_j", j, R_exponent=math.log(R) / math.log(abs(t)))
    return cutoff(spec, mu_j * y, t, scales)


def projection_coefficient(j, Psi, mu1, t, params, cfg=None, c=None, R=None, m=16):
    """d_{j,n+1}: the Z_(n+1) component of H_j on B_{8R} in the variable y_j.

    H_j = zeta_j p (+-) U^(p-1) mu_j^((n-2s)/2) Psi(mu_j y, t) + D_j, with the
    bubble sign of j; Psi(x_abs, t) is a radial callable or None.
    """
    c = _resolve_c(params, c)
    R = _default_R(t, params) if R is None else R
    st = _mu1_state(mu1, t)
    sc = mu0_trajectory(params, c, t)
    mu_j = sc.mu0[j - 1] + st.mu1[j - 1]
    breaks = _zeta_breaks(j, sc.mu0[j - 1] / mu_j, R, params, sc.k)
    y, wy = _ball_rule(breaks, params.n, m)
    Z = dilation_mode(y, params, cfg)
    Hj = Dj_term(j, y, t, st, params, c, cfg)
    if Psi is not None:
        g = params.scaling_dim
        zeta = _zeta_in_y(j, y, t, sc, mu_j, R, params)
        Hj = Hj + zeta * bubble_sign(j, params) * potential(y, params, cfg) * mu_j ** g * Psi(mu_j * y, t)
    return float(wy @ (Hj * Z)) / float(wy @ (Z * Z))


def psi_forcing_term(j, Psi, mu1, t, params, cfg=None, c=None, R=None):
    """mu_j^((n-2s)/2) int zeta_j p (+-) U^(p-1) Psi Z_(n+1) / int Z_(n+1)^2 over B_{8R}.

    This is -mu_0j^(2s-1) times the Psi part of the right side of the
    perturbation system (with (1+mu_11)^(2s-1) in place of mu_0j^(2s-1) for j = 1),
    evaluated by adaptive quadrature as an independent route.
    """
    if Psi is None:
        return 0.0
    c = _resolve_c(params, c)
    R = _default_R(t, params) if R is None else R
    st = _mu1_state(mu1, t)
    sc = mu0_trajectory(params, c, t)
    mu_j = sc.mu0[j - 1] + st.mu1[j - 1]
    g, n = params.scaling_dim, params.n
    sign = bubble_sign(j, params)
    breaks = list(_zeta_breaks(j, sc.mu0[j - 1] / mu_j, R, params, sc.k))

    def num(y):
        zeta = float(_zeta_in_y(j, np.array([y]), t, sc, mu_j, R, params)[0])
        return zeta * potential(y, params, cfg) * Psi(np.array([mu_j * y]), t)[0] * dilation_mode(y, params, cfg) * y ** (n - 1)

    def den(y):
        return dilation_mode(y, params, cfg) ** 2 * y ** (n - 1)

    top = sum(integrate.quad(num, a, b, epsabs=0, epsrel=1e-11, limit=200)[0] for a, b in zip(breaks[:-1], breaks[1:]))
    bot = sum(integrate.quad(den, a, b, epsabs=0, epsrel=1e-11, limit=200)[0] for a, b in zip(breaks[:-1], breaks[1:]))
    return sign * mu_j ** g * top / bot


def potential_moment(params, R=None, cfg=None):
    """int p U^(p-1) Z_(n+1) over B_{8R} (R None: all of R^n)."""
    n = params.n

    def fun(y):
        return potential(y, params, cfg) * dilation_mode(y, params, cfg) * y ** (n - 1)
    upper = math.inf if R is None else 8 * R
    pts = [0.0, 1.0, 10.0]
    val = 0.0
    lo = 0.0
    for hi in pts[1:] + [upper]:
        if hi <= lo:
            continue
        hi_eff = min(hi, upper)
        val += integrate.quad(fun, lo, hi_eff, epsabs=0, epsrel=1e-12, limit=400)[0]
        lo = hi_eff
        if lo >= upper:
            break
    return sphere_area(n) * val


def projection_consistency_residual(j, Psi, mu1, t, params, cfg=None, c=None, R=None):
    """d_{j,n+1} minus its leading-order form in mu_1.

    The leading form is mu_0j^(2s-1) times the left side of the linear
    perturbation system, plus the Psi forcing; what remains is quadratic in
    mu_1 plus a finite-ball moment term linear in mu_1 and small in R.
    """
    c = _resolve_c(params, c)
    R = _default_R(t, params) if R is None else R
    st = _mu1_state(mu1, t)
    d = projection_coefficient(j, Psi, st, t, params, cfg, c, R)
    force = psi_forcing_term(j, Psi, st, t, params, cfg, c, R)
    if j == 1:
        return d - st.dmu1[0] - force / (1 + st.mu1[0]) ** (2 * params.s - 1)
    sc = mu0_trajectory(params, c, t)
    rate = mu0_derivative(params, c, t)[j - 1] / sc.mu0[j - 1]
    n, s = params.n, params.s
    lam0 = sc.mu0[j - 1] / sc.mu0[j - 2]
    # written with d log mu_0j/dt, which is -alpha_j/t on forward towers
    lhs = (st.dmu1[j - 1] - 0.5 * (n - 6 * s + 2) * rate * st.mu1[j - 1]
           + 0.5 * (n - 2 * s) * rate * lam0 * st.mu1[j - 2])
    return d - sc.mu0[j - 1] ** (2 * s - 1) * lhs - force


def scale_mu1(st, factor):
    return Mu1State(np.asarray(st.mu1) * factor, np.asarray(st.dmu1) * factor)
