"""Radial fractional calculus around the critical bubble.

Two independent discretisations of (-Delta)^s live here.  Pointwise values use
spherical means with graded Gauss panels; the dense operator used by the
linear solver and the eigen-solver is assembled by product integration on the
log-spaced grid, where dilation invariance makes it Toeplitz up to a row scale.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.interpolate import PchipInterpolator
from scipy.special import gamma, hyp2f1

from .errors import (IntegralDivergence, NoPositiveEigenvalue, OrthogonalityViolated,
                     SingularSystem, ValidationError)
from .quadrature import (gauss_jacobi_left, gauss_legendre, geometric_breaks, merge_breaks,
                         panel_nodes, refine_breaks, sphere_area)

DIRECTIONS = ("forward", "ancient")
SMALL_KEYS = ("sigma", "delta", "epsilon", "alpha_w", "a_inner", "nu")


@dataclass(frozen=True)
class ModelParams:
    n: int
    s: float
    p: float
    k: int
    t0: float
    direction: str = "forward"
    sigma: float = 0.05
    delta: float = 0.01
    epsilon: float = 0.02
    alpha_w: float = 0.0
    a_inner: float = float("nan")
    nu: float = 1.0

    @property
    def scaling_dim(self):
        """(n-2s)/2, the dilation weight of solutions."""
        return (self.n - 2 * self.s) / 2

    @property
    def forward(self):
        return self.direction == "forward"

    def to_dict(self):
        return asdict(self)


def make_params(n, s, k, t0, direction="forward", smalls=None):
    if int(n) != n or n < 1:
        raise ValidationError(f"n must be a positive integer, got {n}")
    n = int(n)
    s = float(s)
    if not 0 < s < 1:
        raise ValidationError(f"s must lie in (0,1), got {s}")
    if n <= 2 * s:
        raise ValidationError(f"need n > 2s, got n={n}, s={s}")
    if int(k) != k or k < 1:
        raise ValidationError(f"k must be a positive integer, got {k}")
    k = int(k)
    if k >= 2 and n <= 6 * s:
        raise ValidationError(f"tower regime needs n > 6s (n={n}, 6s={6 * s:g})")
    if not t0 > 1:
        raise ValidationError(f"t0 must exceed 1, got {t0}")
    if direction not in DIRECTIONS:
        raise ValidationError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    smalls = dict(smalls or {})
    unknown = set(smalls) - set(SMALL_KEYS)
    if unknown:
        raise ValidationError(f"unknown small-exponent keys: {sorted(unknown)}")
    sigma = float(smalls.get("sigma", 0.05))
    delta = float(smalls.get("delta", 0.01))
    epsilon = float(smalls.get("epsilon", 0.02))
    alpha_w = float(smalls.get("alpha_w", s / 2))
    nu = float(smalls.get("nu", 1.0))
    for name, val in (("sigma", sigma), ("delta", delta), ("epsilon", epsilon), ("nu", nu)):
        if not val > 0:
            raise ValidationError(f"{name} must be positive, got {val}")
    if not delta * (n - 4 * s) < sigma:
        raise ValidationError(f"need delta*(n-4s) < sigma, got {delta * (n - 4 * s):g} >= {sigma:g}")
    if not 0 < alpha_w < s:
        raise ValidationError(f"alpha_w must lie in (0, s), got {alpha_w}")
    if n > 4 * s:
        a_inner = float(smalls.get("a_inner", n / 2))
        if not 2 * s < a_inner < n - 2 * s:
            raise ValidationError(f"a_inner must lie in (2s, n-2s), got {a_inner}")
    else:
        a_inner = float("nan")
    p = (n + 2 * s) / (n - 2 * s)
    return ModelParams(n, s, p, k, float(t0), direction, sigma, delta, epsilon, alpha_w, a_inner, nu)


@dataclass(frozen=True)
class QuadratureConfig:
    n_radial: int = 2048
    n_angular: int = 16
    r_trunc: float = 1e4
    pv_split: float = 0.1
    time_trunc_factor: float = 64.0
    tol: float = 1e-4
    r_min: float = 1e-4
    r_max: float = 1e4

    def __post_init__(self):
        if self.n_radial < 8 or self.n_angular < 8:
            raise ValidationError("n_radial and n_angular must be at least 8")
        if not 0 < self.tol <= 1e-2:
            raise ValidationError(f"tol must lie in (0, 1e-2], got {self.tol}")
        if not 0 < self.r_min < self.r_max:
            raise ValidationError("need 0 < r_min < r_max")
        if not 0 < self.pv_split < 1:
            raise ValidationError("pv_split must lie in (0,1)")
        if self.r_trunc <= 1 or self.time_trunc_factor <= 1:
            raise ValidationError("r_trunc and time_trunc_factor must exceed 1")

    def refined(self):
        return replace(self, n_radial=2 * self.n_radial, n_angular=2 * self.n_angular)

    def to_dict(self):
        return asdict(self)


def radial_grid(cfg):
    return np.geomspace(cfg.r_min, cfg.r_max, cfg.n_radial)


@dataclass(frozen=True, eq=False)
class RadialFunction:
    """Samples of a radial profile on a log grid with a declared power-law tail.

    `exact`, when present, is a vectorised closed form used instead of the
    interpolant; `scales` are the smallest and largest lengths on which the
    profile varies, used to grade quadrature panels.
    """
    radii: np.ndarray
    values: np.ndarray
    tail_exponent: float
    value_at_zero: float
    exact: Optional[Callable] = None
    scales: tuple = (1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        radii = np.asarray(self.radii, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if radii.ndim != 1 or radii.shape != values.shape or len(radii) < 2:
            raise ValidationError("radii and values must be 1-d arrays of equal length >= 2")
        if radii[0] <= 0 or np.any(np.diff(radii) <= 0):
            raise ValidationError("radii must be positive and strictly increasing")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_interp", PchipInterpolator(np.log(radii), values))

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self.exact is not None:
            return self.exact(r)
        return self.interpolate(r)

    def interpolate(self, r):
        r = np.asarray(r, dtype=float)
        out = np.empty_like(r)
        lo, hi = self.radii[0], self.radii[-1]
        small = r < lo
        big = r > hi
        mid = ~(small | big)
        # even continuation: quadratic in r between the origin value and the first sample
        out[small] = self.value_at_zero + (self.values[0] - self.value_at_zero) * (r[small] / lo) ** 2
        out[big] = self.values[-1] * (r[big] / hi) ** self.tail_exponent
        out[mid] = self._interp(np.log(r[mid]))
        return out

    def log_slope(self, r):
        """r f'(r) of the interpolant and its two continuations."""
        r = np.asarray(r, dtype=float)
        out = np.empty_like(r)
        lo, hi = self.radii[0], self.radii[-1]
        small = r < lo
        big = r > hi
        mid = ~(small | big)
        out[small] = 2 * (self.values[0] - self.value_at_zero) * (r[small] / lo) ** 2
        out[big] = self.tail_exponent * self.values[-1] * (r[big] / hi) ** self.tail_exponent
        out[mid] = self._interp.derivative()(np.log(r[mid]))
        return out

    def resample(self, radii):
        radii = np.asarray(radii, dtype=float)
        return RadialFunction(radii, self(radii), self.tail_exponent, self.value_at_zero,
                              self.exact, self.scales, dict(self.meta))

    def to_csv(self, path, n=None, s=None):
        path = Path(path)
        lines = ["r,value"] + [f"{r:.17g},{v:.17g}" for r, v in zip(self.radii, self.values)]
        path.write_text("\n".join(lines) + "\n")
        side = {"tail_exponent": self.tail_exponent, "value_at_zero": self.value_at_zero,
                "n": n, "s": s}
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        side = json.loads(path.with_suffix(".json").read_text())
        return cls(data[:, 0], data[:, 1], side["tail_exponent"], side["value_at_zero"])


def origin_value(values, radii):
    """Value at r = 0 of the even quadratic continuation through the first two samples."""
    e = (radii[1] / radii[0]) ** 2
    return float(values[0] - (values[1] - values[0]) / (e - 1))


def sample(fun, cfg, tail_exponent, scales=(1.0, 1.0), value_at_zero=None, radii=None):
    """RadialFunction carrying a closed form, sampled on the configured grid."""
    radii = radial_grid(cfg) if radii is None else np.asarray(radii, dtype=float)
    v0 = float(fun(np.array([0.0]))[0]) if value_at_zero is None else value_at_zero
    return RadialFunction(radii, fun(radii), tail_exponent, v0, exact=fun, scales=tuple(scales))


def frac_constant(n, s):
    """Normalising constant of the singular-integral definition of (-Delta)^s."""
    return 4.0 ** s * s * gamma(n / 2 + s) / (gamma(1 - s) * np.pi ** (n / 2))


# ---------------------------------------------------------------- pointwise route

def _sphere_mean_excess(fun, r, rho, n, psi, wpsi, fr):
    """Integral over the unit sphere of f(|x+rho*w|) - f(r), |x| = r, for each rho."""
    if n == 1:
        return fun(np.abs(r + rho)) + fun(np.abs(r - rho)) - 2 * fr
    d2 = (r - rho)[:, None] ** 2 + 4 * r * rho[:, None] * np.sin(psi / 2)[None, :] ** 2
    vals = fun(np.sqrt(d2)) - fr
    ang = wpsi * np.sin(psi) ** (n - 2) if n > 2 else wpsi
    return sphere_area(n - 1) * (vals @ ang)


def _angular_rule(r, lo, m):
    # graded toward psi = 0 where the sphere through x passes closest to the origin
    big = max(r, lo)
    levels = int(math.ceil(math.log2(4 * math.pi * big / lo))) + 1
    breaks = np.concatenate([[0.0], math.pi * 2.0 ** -np.arange(levels, -1, -1)])
    return panel_nodes(breaks, m)


def _frac_lap_point(fun, r, n, s, cfg, scales, q):
    lo, hi = scales
    C = frac_constant(n, s)
    area = sphere_area(n)
    m = cfg.n_angular
    big = max(r, lo)
    rho1 = cfg.pv_split * big
    R = cfg.r_trunc * max(r, hi)
    fr = float(fun(np.array([r]))[0])
    if r < 1e-12 * lo:
        r = 0.0
    pts = [rho1, R]
    pts.extend(geometric_breaks(rho1, R))
    if r > 0:
        j = np.arange(0, 200)
        steps = lo * 2.0 ** j
        steps = steps[steps < 2 * r]
        pts.extend(r - steps[steps < r - rho1])
        pts.extend(r + steps)
        pts.append(r)
    breaks = refine_breaks(merge_breaks(pts, rho1, R))
    rho, wrho = panel_nodes(breaks, m)
    xj, wj = gauss_jacobi_left(m, 1 - 2 * s)
    rho0 = rho1 * xj
    if r == 0:
        inner = area * (fun(rho0) - fr)
        outer = area * (fun(rho) - fr)
    else:
        psi, wpsi = _angular_rule(r, lo, m)
        # symmetrised second difference on the first panel
        fwd = _sphere_mean_excess(fun, r, rho0, n, psi, wpsi, fr)
        bwd = _sphere_mean_excess(fun, r, rho0, n, math.pi - psi[::-1], wpsi[::-1], fr)
        inner = 0.5 * (fwd + bwd)
        outer = _sphere_mean_excess(fun, r, rho, n, psi, wpsi, fr)
    near = rho1 ** (2 - 2 * s) * np.dot(wj, inner / rho0 ** 2)
    far = np.dot(wrho, rho ** (-1 - 2 * s) * outer)
    fR = float(fun(np.array([R]))[0])
    tail = area * (fR * R ** (-2 * s) / (2 * s - q) - fr * R ** (-2 * s) / (2 * s))
    return -C * (near + far + tail)


def _as_callable(f):
    if isinstance(f, RadialFunction):
        return f, f.scales, f.tail_exponent
    fun = f
    return fun, getattr(f, "scales", (1.0, 1.0)), getattr(f, "tail_exponent")


def frac_laplacian_radial(f, r, params, cfg, check=False):
    """(-Delta)^s f at |x| = r (scalar or array).

    With check=True also returns an accuracy-degraded flag from a comparison
    against a refined evaluation.
    """
    fun, scales, q = _as_callable(f)
    if not q < 0:
        raise IntegralDivergence(f"tail exponent {q} is not integrable for (-Delta)^s")
    rr = np.atleast_1d(np.asarray(r, dtype=float))
    out = np.array([_frac_lap_point(fun, float(x), params.n, params.s, cfg, scales, q) for x in rr])
    if check:
        fine = replace(cfg, n_angular=2 * cfg.n_angular, pv_split=cfg.pv_split / 2)
        ref = np.array([_frac_lap_point(fun, float(x), params.n, params.s, fine, scales, q)
                        for x in rr])
        scale = max(np.max(np.abs(ref)), 1e-300)
        degraded = bool(np.any(np.abs(out - ref) > cfg.tol * np.maximum(np.abs(ref), 1e-3 * scale)))
        return (out if np.ndim(r) else out[0]), degraded
    return out if np.ndim(r) else out[0]


# ---------------------------------------------------------------- bubble and kernel

@lru_cache(maxsize=64)
def _bubble_alpha(n, s, cfg):
    gap = (n - 2 * s) / 2
    w = lambda r: (1.0 + np.asarray(r) ** 2) ** (-gap)
    d = _frac_lap_point(w, 0.0, n, s, cfg, (1.0, 1.0), -2 * gap)
    return d ** (gap / (2 * s))


def bubble_alpha(params, cfg=None):
    """Amplitude making alpha*(1+r^2)^(-(n-2s)/2) solve (-Delta)^s U = U^p."""
    return _bubble_alpha(params.n, params.s, cfg or QuadratureConfig())


def bubble_profile(r, params, cfg=None):
    a = bubble_alpha(params, cfg)
    return a * (1.0 + np.asarray(r, dtype=float) ** 2) ** (-params.scaling_dim)


def bubble_derivative(r, params, cfg=None):
    a = bubble_alpha(params, cfg)
    r = np.asarray(r, dtype=float)
    g = params.scaling_dim
    return -2 * g * a * r * (1.0 + r ** 2) ** (-g - 1)


def dilation_mode(r, params, cfg=None):
    """((n-2s)/2) U + r U'."""
    a = bubble_alpha(params, cfg)
    r = np.asarray(r, dtype=float)
    g = params.scaling_dim
    return g * a * (1.0 - r ** 2) * (1.0 + r ** 2) ** (-g - 1)


def potential(r, params, cfg=None):
    """p U^(p-1)."""
    a = bubble_alpha(params, cfg)
    return params.p * a ** (params.p - 1) * (1.0 + np.asarray(r, dtype=float) ** 2) ** (-2 * params.s)


def bubble_function(params, cfg):
    return sample(lambda r: bubble_profile(r, params, cfg), cfg, -(params.n - 2 * params.s))


def kernel_elements(params, cfg):
    """(U', ((n-2s)/2)U + rU') as RadialFunctions with exact tails."""
    gap = params.scaling_dim
    z_rad = sample(lambda r: bubble_derivative(r, params, cfg), cfg, -2 * gap - 1, value_at_zero=0.0)
    z_np1 = sample(lambda r: dilation_mode(r, params, cfg), cfg, -2 * gap)
    return z_rad, z_np1


# ---------------------------------------------------------------- grid integrals

def grid_values(f, cfg):
    return f(radial_grid(cfg))


def radial_integral(values, radii, n, tail_exponent, value_at_zero=None, truncate=False):
    """Integral over R^n of a radial function sampled on a log-uniform grid.

    Trapezoid in log r extended by the constant core below the grid and the
    declared power tail above it; both extensions are summed in closed form.
    """
    values = np.asarray(values, dtype=float)
    h = math.log(radii[1] / radii[0])
    area = sphere_area(n)
    body = values * radii ** n
    total = h * (body.sum() - 0.5 * body[0] - 0.5 * body[-1])
    v0 = values[0] if value_at_zero is None else value_at_zero
    lam_lo = math.exp(-n * h)
    total += h * v0 * radii[0] ** n * (0.5 + lam_lo / (1 - lam_lo))
    lam = n + tail_exponent
    if lam < 0:
        e = math.exp(lam * h)
        total += h * body[-1] * (0.5 + e / (1 - e))
    elif not truncate:
        raise IntegralDivergence(f"integrand tail r^{tail_exponent} not integrable in dimension {n}")
    else:
        total += 0.5 * h * body[-1]
    return area * total


def radial_inner(f, g, n, cfg, truncate=False, extend=1e6):
    """Integral of f g over R^n.

    When both factors carry closed forms the grid is continued `extend`
    times past r_max, so sub-leading tails left out by the single-exponent
    extension become negligible.
    """
    r = radial_grid(cfg)
    both_exact = all(isinstance(x, RadialFunction) and x.exact is not None for x in (f, g))
    if both_exact and extend > 1:
        h = math.log(r[1] / r[0])
        extra = int(math.ceil(math.log(extend) / h))
        r = r[0] * np.exp(h * np.arange(len(r) + extra))
    fv, gv = f(r), g(r)
    f0 = f.value_at_zero if isinstance(f, RadialFunction) else fv[0]
    g0 = g.value_at_zero if isinstance(g, RadialFunction) else gv[0]
    return radial_integral(fv * gv, r, n, f.tail_exponent + g.tail_exponent, f0 * g0, truncate)


def radial_norm(f, n, cfg):
    """L2 norm; a non-integrable tail is cut at r_max."""
    return math.sqrt(radial_inner(f, f, n, cfg, truncate=True))


# ---------------------------------------------------------------- matrix route

def _full_kernel(t, n, s):
    """t^(n-1) times the sphere integral of |e - t w|^(-n-2s)."""
    beta = n + 2 * s
    A = 1.0 + t * t
    z = (2 * t / A) ** 2
    return t ** (n - 1) * sphere_area(n) * A ** (-beta / 2) * hyp2f1(beta / 4, beta / 4 + 0.5, n / 2, z)


def _restricted_kernel(t, n, s, kappa, m=16):
    """Same as _full_kernel but excluding the ball |e - t w| < kappa."""
    beta = n + 2 * s
    out = np.empty_like(t)
    for i, ti in enumerate(t):
        cos0 = (1 + ti * ti - kappa * kappa) / (2 * ti)
        th0 = math.acos(min(1.0, max(-1.0, cos0)))
        if n == 1:
            out[i] = 0.0
            continue
        breaks = np.concatenate([th0 * 2.0 ** np.arange(0, 60), [math.pi]])
        breaks = breaks[breaks <= math.pi]
        if breaks[-1] != math.pi:
            breaks = np.append(breaks, math.pi)
        th, w = panel_nodes(breaks, m)
        d2 = (1 - ti) ** 2 + 4 * ti * np.sin(th / 2) ** 2
        vals = d2 ** (-beta / 2) * (np.sin(th) ** (n - 2) if n > 2 else 1.0)
        out[i] = ti ** (n - 1) * sphere_area(n - 1) * np.dot(w, vals)
    return out


def _kernel(t, n, s, kappa):
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    near = np.abs(t - 1) < kappa
    out[~near] = _full_kernel(t[~near], n, s)
    if np.any(near):
        out[near] = _restricted_kernel(t[near], n, s, kappa)
    return out


# local Lagrange cardinal pieces on a unit cell [0,1] with nodes -2..3
_STENCIL = np.arange(-2, 4)


def _lagrange6(u):
    out = []
    for a in _STENCIL:
        v = np.ones_like(u)
        for b in _STENCIL:
            if b != a:
                v = v * (u - b) / (a - b)
        out.append(v)
    return np.stack(out)


@lru_cache(maxsize=32)
def _product_weights(n, s, h, kappa, m_lo, m_hi):
    """W_m = integral of cardinal_m(log t / h) k(t) dt for m in [m_lo, m_hi]."""
    W = np.zeros(m_hi - m_lo + 1)
    kinks = sorted({math.log(1 - kappa) / h, math.log(1 + kappa) / h})
    cells = np.arange(m_lo - 3, m_hi + 3)
    lim = int(math.ceil(math.log(1 + kappa) / h)) + 2
    special = set(range(-lim - 1, lim + 1))
    special.update(int(math.floor(kx)) for kx in kinks)

    def scatter(cidx, vals):
        for col, a in enumerate(_STENCIL):
            idx = cidx + a - m_lo
            ok = (idx >= 0) & (idx < len(W))
            np.add.at(W, idx[ok], vals[ok, col])

    xg, wg = gauss_legendre(8)
    regular = np.array([c for c in cells if c not in special])
    xi = regular[:, None] + xg[None, :]
    kt = _kernel(np.exp(xi * h).ravel(), n, s, kappa).reshape(xi.shape) * np.exp(xi * h) * h
    scatter(regular, (kt * wg[None, :]) @ _lagrange6(xg).T)
    for c in sorted(special):
        cuts = [0.0] + [kx - c for kx in kinks if 0 < kx - c < 1] + [1.0]
        uu, ww = panel_nodes(cuts, 16)
        xi = c + uu
        kt = _kernel(np.exp(xi * h), n, s, kappa) * np.exp(xi * h) * h
        scatter(np.array([c]), (_lagrange6(uu) @ (kt * ww))[None, :])
    return W


def _even_factor(v, h):
    """Weight of the second sample when extending an even profile below the grid."""
    return (math.exp(2 * h * v) - 1) / (math.exp(2 * h) - 1)


def _ghost(v, N, q, h):
    """[(column, factor), ...] for virtual node v under the core/tail extension."""
    if v < 0:
        phi = _even_factor(v, h)
        return [(0, 1 - phi), (1, phi)]
    if v > N - 1:
        return [(N - 1, math.exp(q * h * (v - N + 1)))]
    return [(v, 1.0)]


def _stencil_matrix(N, q, h, sten):
    M = np.zeros((N, N))
    half = len(sten) // 2
    for i in range(N):
        for o, c in zip(range(-half, half + 1), sten):
            for j, fac in _ghost(i + o, N, q, h):
                M[i, j] += c * fac
    return M


def _near_matrices(N, q, h, n):
    """r^2 Laplacian and r^4 bi-Laplacian in log variables (fourth-order differences)."""
    d1 = np.array([1, -8, 0, 8, -1]) / (12 * h)
    d2 = np.array([-1, 16, -30, 16, -1]) / (12 * h * h)
    D1 = _stencil_matrix(N, q, h, d1)
    D2 = _stencil_matrix(N, q, h, d2)
    P = D2 + (n - 2) * D1
    Q = D2 + (n - 6) * D1 + (8 - 2 * n) * np.eye(N)
    return P, Q @ P


@lru_cache(maxsize=16)
def _laplacian_matrix(n, s, cfg, q):
    r = radial_grid(cfg)
    N = len(r)
    h = math.log(r[1] / r[0])
    kappa = min(2 * h, 0.25)
    pad = 4
    m_lo, m_hi = -(N - 1) - pad, (N - 1) + pad
    W = _product_weights(n, s, h, kappa, m_lo, m_hi)
    area = sphere_area(n)
    t_lo = math.exp((m_lo - 0.5) * h)
    t_hi = math.exp((m_hi + 0.5) * h)
    low_rest = area * t_lo ** n / n
    high_rest = area * t_hi ** (-2 * s) / (2 * s)
    total = W.sum() + low_rest + high_rest
    off = -m_lo
    idx = np.arange(N)
    T = -W[off + (idx[None, :] - idx[:, None])]
    # nodes below the grid follow the even extension of the first two samples
    e2 = math.exp(2 * h)
    ms = np.arange(m_lo, m_hi + 1)
    csum = np.concatenate([[0.0], np.cumsum(W)])
    csum2 = np.concatenate([[0.0], np.cumsum(W * np.exp(2 * h * ms))])
    s0 = csum[off - idx] + low_rest
    s2 = np.exp(2 * h * idx) * csum2[off - idx]
    phi_sum = (s2 - s0) / (e2 - 1)
    T[:, 0] -= s0 - phi_sum
    T[:, 1] -= phi_sum
    # nodes above the grid follow the tail law of the last sample;
    # H[a] = sum over a' > a of W[a'] e^{qh(a'-a)}, closed beyond the table
    e = math.exp(q * h)
    H = np.empty(len(W))
    H[-1] = area * t_hi ** (-2 * s) / (2 * s - q)
    for a in range(len(W) - 2, -1, -1):
        H[a] = e * (W[a + 1] + H[a + 1])
    T[:, N - 1] -= H[off + (N - 1 - idx)]
    T[idx, idx] += total
    P, P2 = _near_matrices(N, q, h, n)
    near = -(area / (2 * n)) * kappa ** (2 - 2 * s) / (2 - 2 * s) * P
    near -= area / (8 * n * (n + 2)) * kappa ** (4 - 2 * s) / (4 - 2 * s) * P2
    return frac_constant(n, s) * r[:, None] ** (-2 * s) * (T + near)


def laplacian_matrix(params, cfg, tail_exponent):
    """Dense (-Delta)^s on radial_grid(cfg) for functions with the given tail."""
    return _laplacian_matrix(params.n, params.s, cfg, float(tail_exponent))


def l0_matrix(params, cfg, tail_exponent):
    r = radial_grid(cfg)
    return -laplacian_matrix(params, cfg, tail_exponent) + np.diag(potential(r, params, cfg))


def apply_L0(f, params, cfg, radii=None, method="quadrature"):
    """-(-Delta)^s f + p U^(p-1) f sampled on `radii` (default: f's grid)."""
    if method == "matrix":
        r = radial_grid(cfg)
        vals = l0_matrix(params, cfg, f.tail_exponent) @ f(r)
    else:
        r = f.radii if radii is None else np.asarray(radii, dtype=float)
        if np.allclose(f.values, 0) and f.exact is None:
            vals = np.zeros_like(r)
        else:
            vals = -frac_laplacian_radial(f, r, params, cfg) + potential(r, params, cfg) * f(r)
    q = f.tail_exponent - 2 * params.s
    if r[0] == 0:
        return RadialFunction(r[1:], vals[1:], q, float(vals[0]))
    return RadialFunction(r, vals, q, float(vals[0]))


def solve_L0_orthogonal(h, params, cfg):
    """phi with L0 phi = -h and phi -> 0 at infinity.

    The dilation-mode component is removed with respect to the pairing
    weighted by p U^(p-1); meta records both that pairing and the plain one
    truncated at r_max.
    """
    n, s = params.n, params.s
    if not h.tail_exponent < -2 * s:
        raise ValidationError(f"source tail r^{h.tail_exponent} must decay faster than r^(-2s)")
    _, z = kernel_elements(params, cfg)
    r = radial_grid(cfg)
    hv = h(r)
    ratio = abs(radial_inner(h, z, n, cfg)) / (radial_norm(h, n, cfg) * radial_norm(z, n, cfg))
    if ratio > 1e-6:
        raise OrthogonalityViolated(f"source not orthogonal to the dilation mode: ratio {ratio:.3e}")
    q = max(h.tail_exponent + 2 * s, 2 * s - n)
    A = l0_matrix(params, cfg, q) + 1e-12 * np.eye(len(r))
    zv = z(r)
    hstep = math.log(r[1] / r[0])
    w = sphere_area(n) * hstep * r ** n
    N = len(r)
    B = np.zeros((N + 1, N + 1))
    B[:N, :N] = A
    B[:N, N] = zv
    # the plain pairing with Z_{n+1} diverges logarithmically against an r^(-2s) tail,
    # so the kernel component is fixed through the potential-weighted pairing
    B[N, :N] = w * zv * potential(r, params, cfg)
    rhs = np.append(-hv, 0.0)
    scale = 1.0 / np.max(np.abs(B), axis=1)
    Bs = B * scale[:, None]
    lu, piv = linalg.lu_factor(Bs)
    rcond = linalg.lapack.dgecon(lu, np.linalg.norm(Bs, 1), norm="1")[0]
    if rcond < np.finfo(float).eps:
        raise SingularSystem(f"deflated system is numerically singular (rcond {rcond:.3e})")
    sol = linalg.lu_solve((lu, piv), rhs * scale)
    # one refinement step estimates the error the conditioning puts on the solution
    corr = linalg.lu_solve((lu, piv), rhs * scale - Bs @ sol)
    drift = float(np.max(np.abs(corr[:N])) / max(np.max(np.abs(sol[:N])), 1e-300))
    if drift > cfg.tol:
        raise SingularSystem(f"deflated system too ill-conditioned: refinement changes phi by {drift:.3e}")
    sol = sol + corr
    phi = sol[:N]
    meta = {"multiplier": float(sol[N]), "condition": float(1 / rcond), "orthogonality": ratio,
            "refinement": drift, "weighted_pairing": float(np.dot(B[N, :N], phi)),
            "plain_pairing_truncated": float(np.dot(w * zv, phi))}
    return RadialFunction(r, phi, q, origin_value(phi, r), scales=h.scales, meta=meta)


def eigenpair_unstable(params, cfg, max_iter=200):
    """Largest eigenvalue of the discretised L0 and its eigenfunction (sup = 1).

    Shift-and-invert power iteration, the shift sitting above sup p U^(p-1)
    which bounds the spectrum from above.
    """
    n, s = params.n, params.s
    q = -(n + 2 * s)
    r = radial_grid(cfg)
    A = l0_matrix(params, cfg, q)
    N = len(r)
    w = sphere_area(n) * math.log(r[1] / r[0]) * r ** n
    shift = 1.5 * potential(0.0, params, cfg) + 1.0
    x = potential(r, params, cfg) * (1 + r ** 2) ** (-n / 2)
    lam = 0.0
    lu = linalg.lu_factor(shift * np.eye(N) - A)
    for it in range(max_iter):
        y = linalg.lu_solve(lu, x)
        y /= np.max(np.abs(y))
        lam_new = float(np.dot(w * y, A @ y) / np.dot(w * y, y))
        done = np.max(np.abs(y - x)) < 1e-13 or abs(lam_new - lam) < 1e-14 * max(1, abs(lam_new))
        x, lam = y, lam_new
        if done:
            break
        if it == 10:
            # one Rayleigh refinement of the shift accelerates the tail of the iteration
            shift = lam + 1e-3 * max(abs(lam), 1e-3)
            lu = linalg.lu_factor(shift * np.eye(N) - A)
    if not lam > 0:
        raise NoPositiveEigenvalue(f"largest discrete eigenvalue {lam:.3e} is not positive")
    i = int(np.argmax(np.abs(x)))
    x = x / x[i]
    return lam, RadialFunction(r, x, q, origin_value(x, r), meta={"iterations": it + 1})
