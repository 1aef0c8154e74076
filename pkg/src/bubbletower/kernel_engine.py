"""Fractional heat kernel, the Duhamel operator and the outer weight catalog.

The Duhamel integral of a radial source is reduced to a double integral in
(tau, rho): the angular part of the spatial convolution has a closed form in
terms of 2F1, the radial part uses Gauss panels graded at |x|, at the
kernel width tau^(1/2s) and at the support edges of the source, and the
time integral is cut at time_trunc_factor * t and closed by the power law
of the source's declared majorant.
"""
from __future__ import annotations

import json
import math
from functools import lru_cache
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import beta as beta_fn
from scipy.special import gamma as gamma_fn
from scipy.special import hyp2f1

from .errors import HypothesisViolated, TailUnclosable, ValidationError
from .quadrature import gauss_legendre, merge_breaks, panel_nodes, refine_breaks, sphere_area
from .param_dynamics import alpha_exponents, beta_coefficients


def heat_kernel(x_abs, t, params):
    """K_s(x, t) = t / (t^(1/s) + |x|^2)^((n+2s)/2), un-normalised."""
    if not np.all(np.asarray(t) > 0):
        raise ValidationError("heat kernel needs t > 0")
    x = np.asarray(x_abs, dtype=float)
    return t / (t ** (1 / params.s) + x * x) ** ((params.n + 2 * params.s) / 2)


def kernel_mass(params):
    """Integral of K_s(., t) over R^n, the same for every t."""
    n, s = params.n, params.s
    return sphere_area(n) * 0.5 * beta_fn(n / 2, s)


_V_TABLE = 20.0


@lru_cache(maxsize=None)
def _angular_table(n, s):
    """Spline of (1-z)^(s+1/2) 2F1(b/4, b/4+1/2; n/2; z) in v = -log(1-z), b = n+2s.

    The rescaled function is smooth and bounded in v and tends to the
    Gauss constant as z -> 1; past the table end that constant is used.
    """
    be = n + 2 * s
    a, b, c = be / 4, be / 4 + 0.5, n / 2
    v = np.linspace(0.0, _V_TABLE, 4001)
    g = hyp2f1(a, b, c, -np.expm1(-v)) * np.exp(-v * (s + 0.5))
    limit = gamma_fn(c) * gamma_fn(a + b - c) / (gamma_fn(a) * gamma_fn(b))
    return CubicSpline(v, g), float(limit)


def _angular(r, rho, tau, n, s):
    """Integral over the unit sphere of K_s(x - rho w, tau) for |x| = r."""
    be = n + 2 * s
    rho = np.asarray(rho, dtype=float)
    tau = np.asarray(tau, dtype=float)
    w = tau ** (1 / s)
    A = w + r * r + rho * rho
    # 1 - z = (A - 2 r rho)(A + 2 r rho) / A^2 without cancellation
    v = 2 * np.log(A) - np.log(w + (r - rho) ** 2) - np.log(A + 2 * r * rho)
    spline, limit = _angular_table(n, s)
    g = np.where(v < _V_TABLE, spline(np.minimum(v, _V_TABLE)), limit)
    return tau * sphere_area(n) * A ** (-be / 2) * g * np.exp(v * (s + 0.5))


# ---------------------------------------------------------------- sources

@dataclass(frozen=True)
class PowerPiece:
    """coef * l^b * |y|^(-a) on c1 l^d1 <= |y| <= c2 l^d2 (c2 may be inf)."""
    coef: float
    b: float
    a: float
    c1: float = 0.0
    d1: float = 0.0
    c2: float = math.inf
    d2: float = 0.0

    def edges(self, l):
        lo = self.c1 * l ** self.d1
        hi = self.c2 * l ** self.d2 if math.isfinite(self.c2) else math.inf
        return lo, hi

    def value(self, y, l):
        y = np.asarray(y, dtype=float)
        lo, hi = self.edges(l)
        inside = (y >= lo) & (y <= hi) & (y > 0)
        return np.where(inside, self.coef * l ** self.b * np.where(y > 0, y, 1.0) ** (-self.a), 0.0)

    def decay(self, n, s):
        """Exponent e with (spatial convolution at time l) <~ l^e for large l."""
        top = min(self.d2, 1 / (2 * s)) if math.isfinite(self.c2) else 1 / (2 * s)
        if self.a < n:
            return self.b - n / (2 * s) + top * (n - self.a)
        if self.a > n:
            if self.c1 <= 0:
                return math.inf
            return self.b - n / (2 * s) + min(self.d1, 1 / (2 * s)) * (n - self.a)
        # logarithmic mass, charged a small margin
        return self.b - n / (2 * s) + 1e-3


@dataclass
class SpaceTimeSource:
    """|G(y, l)| for radial y, with a majorant made of power pieces.

    `fun` defaults to the sum of the pieces.  The majorant fixes the time
    remainder, the support edges used as quadrature breaks and the spatial
    tail closure.  A vectorized `fun` accepts l broadcast against y, which
    lets the Duhamel integrator evaluate all time slices in one call.
    """
    pieces: tuple
    fun: Optional[Callable] = None
    kinks: Optional[Callable] = None
    vectorized: bool = True

    def __call__(self, y, l):
        if self.fun is not None:
            return np.abs(self.fun(np.asarray(y, dtype=float), l))
        return sum(p.value(y, l) for p in self.pieces)

    def rows(self, y, l):
        """Values on a (rows, nodes) array y with one time l per row."""
        y = np.asarray(y, dtype=float)
        l = np.asarray(l, dtype=float)
        if self.vectorized:
            return np.broadcast_to(self(y, l[:, None]), y.shape)
        return np.stack([self(y[i], float(l[i])) for i in range(y.shape[0])])

    def decay(self, n, s):
        if not self.pieces:
            return None
        return max(p.decay(n, s) for p in self.pieces)

    def edges(self, l):
        pts = []
        for p in self.pieces:
            lo, hi = p.edges(l)
            pts.extend(v for v in (lo, hi) if 0 < v < math.inf)
        if self.kinks is not None:
            pts.extend(float(v) for v in self.kinks(l) if v > 0)
        return pts

    def unbounded(self):
        return any(not math.isfinite(p.c2) for p in self.pieces)

    def tail_power(self):
        """Slowest spatial decay |y|^(-a) among pieces with unbounded support."""
        tails = [p.a for p in self.pieces if not math.isfinite(p.c2)]
        return min(tails) if tails else math.inf

    def singular_at_zero(self):
        return any(p.c1 == 0 and p.a > 0 for p in self.pieces)


def power_source(b, a, c1=0.0, d1=0.0, c2=math.inf, d2=0.0, coef=1.0):
    return SpaceTimeSource((PowerPiece(coef, b, a, c1, d1, c2, d2),))


# ---------------------------------------------------------------- Duhamel operator

def _orders(cfg):
    m = max(4, cfg.n_angular // 2)
    return m, m


def _edge_matrix(f, ls):
    """Support edges of the source per time slice, nan where absent."""
    cols = []
    for p in f.pieces:
        lo, hi = p.edges(ls)
        cols.append(np.broadcast_to(lo, ls.shape))
        cols.append(np.broadcast_to(hi, ls.shape))
    if f.kinks is not None:
        ks = [[float(v) for v in f.kinks(float(l))] for l in ls]
        width = max((len(k) for k in ks), default=0)
        for i in range(width):
            cols.append(np.array([k[i] if i < len(k) else np.nan for k in ks]))
    if not cols:
        return np.full((ls.size, 1), np.nan)
    E = np.column_stack(cols).astype(float)
    return np.where((E > 0) & np.isfinite(E), E, np.nan)


def _break_matrix(f, r, taus, ls, s, scale_floor):
    """Radial breakpoints per time slice, padded with the row's upper limit.

    Breaks sit at the support edges, at |x| with a ladder of ratio 4 in
    units of the kernel width, at a geometric ladder towards the origin
    and at a global ratio-4 ladder up to the cut-off.
    """
    w = taus ** (1 / (2 * s))
    E = _edge_matrix(f, ls)
    feats = np.column_stack([w, E] + ([np.full_like(w, r)] if r > 0 else []))
    top = np.nanmax(feats, axis=1)
    if not f.unbounded() and f.pieces:
        rho_max = np.nanmax(E, axis=1)
    else:
        rho_max = 1e3 * top
    lo = np.maximum(np.nanmin(feats, axis=1), scale_floor)
    cols = [np.zeros_like(w), rho_max, E]
    if r > 0:
        reach = 4 * np.maximum(r, w)
        n_up = int(np.ceil(np.log(np.max(reach / w)) / np.log(4.0))) + 3
        steps = w[:, None] * 4.0 ** np.arange(-2, n_up)
        ok = steps < reach[:, None]
        cols += [np.full_like(w, r), np.where(ok & (steps < r), r - steps, np.nan), np.where(ok, r + steps, np.nan)]
    if f.singular_at_zero():
        cols.append(lo[:, None] * 4.0 ** -np.arange(1, 20))
    else:
        cols.append(lo[:, None] * 2.0 ** -np.arange(1, 4))
    n_glob = int(np.ceil(np.log(np.max(rho_max / lo)) / np.log(4.0))) + 1
    cols.append(lo[:, None] * 4.0 ** np.arange(1, max(n_glob, 1) + 1))
    B = np.column_stack([np.reshape(c, (w.size, -1)) for c in cols])
    B = np.where((B >= 0) & (B <= rho_max[:, None]), B, np.nan)
    B = np.sort(B, axis=1)
    B = B[:, :int(np.max(np.sum(~np.isnan(B), axis=1)))]
    return np.where(np.isnan(B), rho_max[:, None], B), rho_max


def _slices(f, r, taus, ls, n, s, m, scale_floor):
    """Spatial convolution of |f(., l)| with K_s(., tau) at |x| = r, one value per slice."""
    B, rho_max = _break_matrix(f, r, taus, ls, s, scale_floor)
    x, wg = gauss_legendre(m)
    h = np.diff(B, axis=1)
    rho = (B[:, :-1, None] + h[:, :, None] * x).reshape(B.shape[0], -1)
    wts = (h[:, :, None] * wg).reshape(B.shape[0], -1)
    vals = f.rows(rho, ls)
    kern = _angular(r, rho, taus[:, None], n, s)
    with np.errstate(invalid="ignore"):
        out = np.sum(np.where(vals != 0, wts * vals * rho ** (n - 1) * kern, 0.0), axis=1)
    if f.unbounded():
        a = f.tail_power()
        g = f.rows(rho_max[:, None], ls)[:, 0]
        if np.any(g != 0):
            if not a + 2 * s > 0:
                raise TailUnclosable(f"spatial tail |y|^-{a} not closable against the kernel")
            out = out + sphere_area(n) * taus * g * rho_max ** (-2 * s) / (a + 2 * s)
    return out


def _space_integral(f, r, tau, l, n, s, m, scale_floor):
    return float(_slices(f, r, np.array([float(tau)]), np.array([float(l)]), n, s, m, scale_floor)[0])


def _time_breaks(f, r, t, T, s):
    L = T * t
    feats = [v for v in [r] + f.edges(t) + f.edges(L) if v > 0]
    small = min(feats + [t ** (1 / (2 * s))])
    tau_min = 1e-6 * min(small ** (2 * s), t)
    if r > 0:
        # keep 1 - z of the angular 2F1 resolvable in double precision
        tau_min = max(tau_min, (1e-8 * r * r) ** s)
    tau_max = (T - 1) * t
    return tau_min, tau_max


def duhamel_conv(f, x_abs, t, params, cfg, ancient=False, check=False):
    """Integral over l > t of the spatial convolution of K_s(., l - t) with |f(., l)|.

    With ancient=True the integral runs over l < t (t < 0) against
    K_s(., t - l), by reflection of the time variable.
    """
    if f is None:
        raise TailUnclosable("no source given")
    xs = np.atleast_1d(np.asarray(x_abs, dtype=float))
    out = np.array([_duhamel_point(f, float(x), t, params, cfg, ancient) for x in xs])
    if check:
        fine = replace(cfg, n_angular=2 * cfg.n_angular)
        ref = np.array([_duhamel_point(f, float(x), t, params, fine, ancient) for x in xs])
        degraded = bool(np.any(np.abs(out - ref) > 10 * cfg.tol * np.maximum(np.abs(ref), 1e-300)))
        return (out if np.ndim(x_abs) else out[0]), degraded
    return out if np.ndim(x_abs) else out[0]


def _duhamel_point(f, r, t, params, cfg, ancient):
    n, s = params.n, params.s
    if ancient:
        if not t < 0:
            raise ValidationError("ancient Duhamel integral needs t < 0")
        src = SpaceTimeSource(f.pieces, lambda y, l: f(y, -l), None if f.kinks is None
                              else (lambda l: f.kinks(-l)), f.vectorized)
        return _duhamel_point(src, r, -t, params, cfg, False)
    if not t > 0:
        raise ValidationError("Duhamel integral needs t > 0")
    e = f.decay(n, s)
    if e is None:
        raise TailUnclosable("source declares no majorant for the time remainder")
    if not e < -1:
        raise TailUnclosable(f"majorant decays like l^{e:.4g}, not integrable in time")
    T = cfg.time_trunc_factor
    m_t, m_x = _orders(cfg)
    tau_min, tau_max = _time_breaks(f, r, t, T, s)
    lb = np.log(np.geomspace(tau_min, tau_max, max(2, int(math.ceil(math.log(tau_max / tau_min, 4)))) + 1))
    xg, wg = gauss_legendre(m_t)
    taus = np.exp(lb[:-1, None] + np.diff(lb)[:, None] * xg[None, :]).ravel()
    tw = (np.diff(lb)[:, None] * wg[None, :]).ravel() * taus
    L = t + tau_max
    # the last row is the closure of the time integral past tau_max
    taus = np.append(taus, tau_max)
    tw = np.append(tw, L / (-1 - e))
    floor = 1e-3 * tau_min ** (1 / (2 * s))
    total = float(np.dot(tw, _slices(f, r, taus, t + taus, n, s, m_x, floor)))
    # below tau_min the kernel acts as its mass times the source at (x, t)
    total += tau_min * kernel_mass(params) * float(f(np.array([r]), t)[0]) if r > 0 else 0.0
    return total


# ---------------------------------------------------------------- weights

FAMILIES = ("w11", "w11p", "w1j", "w1jp", "w1jpp", "w2j", "w3")


@dataclass(frozen=True)
class WeightFamily:
    id: str
    j: int
    params: object
    c: float
    star: bool = False

    def __post_init__(self):
        k = self.params.k
        if self.id not in FAMILIES:
            raise ValidationError(f"unknown weight family {self.id!r}")
        if self.id in ("w11", "w11p", "w3") and self.j != 1:
            raise ValidationError(f"{self.id} carries j = 1")
        if self.id in ("w1j", "w1jp", "w1jpp") and not 2 <= self.j <= k:
            raise ValidationError(f"{self.id} needs 2 <= j <= k")
        if self.id == "w2j" and not 1 <= self.j <= k - 1:
            raise ValidationError("w2j needs 1 <= j <= k-1")

    @property
    def gamma(self):
        return gamma_j(self.j, self.params)

    def label(self):
        return f"{self.id}{'*' if self.star else ''}[{self.j}]"


def gamma_j(j, params):
    if j == 1:
        return -1 - params.sigma
    al = alpha_exponents(params)
    return params.scaling_dim * al[j - 2] - params.sigma


@dataclass(frozen=True)
class _Scales:
    T: object
    mu: list        # mu_{0,1..k}
    mub: list       # mub[j] = bar mu_{0,j}, j = 1..k+1, index 0 unused
    beta: np.ndarray
    al: np.ndarray


@lru_cache(maxsize=64)
def _coefficients(params, c):
    return alpha_exponents(params), beta_coefficients(params, c)


def _scales(params, c, t):
    T = np.abs(np.asarray(t, dtype=float))
    if T.ndim == 0:
        T = float(T)
    al, be = _coefficients(params, float(c))
    k = params.k
    mu = [be[i] * T ** -al[i] for i in range(k)]
    mub = [0.0] * (k + 2)
    mub[1] = T ** params.delta
    for j in range(2, k + 1):
        mub[j] = np.sqrt(mu[j - 1] * mu[j - 2])
    return _Scales(T, mu, mub, be, al)


def _ind(cond):
    return np.asarray(cond, dtype=float)


def weight_value(fam, x_abs, t):
    """Primary form of the family (starred form when fam.star)."""
    if fam.star:
        return weight_star_value(fam, x_abs, t)
    x = np.asarray(x_abs, dtype=float)
    P = fam.params
    n, s, sig, al_w = P.n, P.s, P.sigma, P.alpha_w
    sc = _scales(P, fam.c, t)
    T, j = sc.T, fam.j
    g = fam.gamma
    # masked selection rather than indicator products, so 0 * inf never appears
    xs = np.where(x > 0, x, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        if fam.id == "w11":
            return T ** (-1 - sig) / (1 + x ** (2 * s + al_w)) * _ind(x <= 2 * sc.mub[1])
        if fam.id == "w11p":
            top = T ** (1 / (2 * s))
            mid = np.where((x >= sc.mub[1]) & (x <= top), T ** g * sc.mub[1] ** (n - 2 * s - al_w) * xs ** (-s - n), 0.0)
            far = np.where(x >= top, T ** g * xs ** (-n - 2 * s), 0.0)
            return np.where(x > 0, mid + far, 0.0)
        mu = sc.mu[j - 1]
        if fam.id == "w1j":
            lam = mu / sc.mu[j - 2]
            return (T ** -sig * mu ** (-(n + 2 * s) / 2) * lam ** P.scaling_dim
                    / (1 + (x / mu) ** (2 * s + al_w)) * _ind(x <= 2 * sc.mub[j]))
        if fam.id == "w1jp":
            return np.where((x > 0) & (x >= sc.mub[j]), mu ** n * T ** g * xs ** (-n - 2 * s), 0.0)
        if fam.id == "w1jpp":
            return np.where((x > 0) & (x >= sc.mub[j]), sc.mub[j] ** n * T ** g * xs ** (-n - 2 * s), 0.0)
        if fam.id == "w2j":
            upper = 1.0 if j == 1 else sc.mub[j]
            amp = T ** -sig * sc.mu[j] ** (n / 2 - 2 * s) * sc.mu[j - 1] ** -s
            return np.where((x > 0) & (x >= sc.mub[j + 1]) & (x <= upper), amp * xs ** (2 * s - n), 0.0)
        # w3
        return np.where((x > 0) & (x >= sc.mub[1]), T ** (P.delta * (n - 4 * s)) * T ** (-1 - sig) * xs ** (2 * s - n), 0.0)


def weight_simplified(fam, x_abs, t):
    """The piecewise power forms given alongside w11 and w1j."""
    x = np.asarray(x_abs, dtype=float)
    P = fam.params
    s, al_w = P.s, P.alpha_w
    sc = _scales(P, fam.c, t)
    T, j, g = sc.T, fam.j, fam.gamma
    with np.errstate(divide="ignore", over="ignore"):
        if fam.id == "w11":
            return (T ** g * _ind(x <= 1)
                    + T ** g * np.where(x > 0, x, 1.0) ** (-2 * s - al_w) * _ind((x > 1) & (x <= 2 * sc.mub[1])))
        if fam.id == "w1j":
            mu = sc.mu[j - 1]
            return (mu ** (-2 * s) * T ** g * _ind(x <= mu)
                    + mu ** al_w * T ** g * np.where(x > 0, x, 1.0) ** (-2 * s - al_w)
                    * _ind((x > mu) & (x <= 2 * sc.mub[j])))
    raise ValidationError(f"{fam.id} has no simplified form")


def weight_star_value(fam, x_abs, t):
    x = np.asarray(x_abs, dtype=float)
    P = fam.params
    n, s, sig, al_w, dl = P.n, P.s, P.sigma, P.alpha_w, P.delta
    sc = _scales(P, fam.c, t)
    T, j, g = sc.T, fam.j, fam.gamma
    xs = np.where(x > 0, x, 1.0)
    top = T ** (1 / (2 * s))
    with np.errstate(divide="ignore", over="ignore"):
        if fam.id == "w11":
            m1 = sc.mub[1]
            return np.select([x <= 1, x <= 2 * m1],
                             [T ** g, T ** g * xs ** -al_w],
                             T ** (g + dl * (n - 2 * s - al_w)) * xs ** (2 * s - n))
        if fam.id == "w11p":
            return np.where(x <= sc.mub[1], T ** (g - dl * (s + al_w)),
                            T ** (g + (n - 3 * s - al_w) * dl) * xs ** (2 * s - n))
        mu, mb = sc.mu[j - 1], sc.mub[j]
        if fam.id == "w1j":
            return np.where(x <= 4 * mb, T ** g, T ** g * mu ** al_w * mb ** (n - 2 * s - al_w) * xs ** (2 * s - n))
        if fam.id == "w1jp":
            return np.where(x <= mb, mu ** n * T ** g * mb ** -n, mu ** n * T ** g * mb ** (-2 * s) * xs ** (2 * s - n))
        if fam.id == "w1jpp":
            return np.where(x <= mb, T ** g, mb ** (n - 2 * s) * T ** g * xs ** (2 * s - n))
        if fam.id == "w2j":
            if j == 1:
                m2 = sc.mub[2]
                return np.select([x <= m2, x <= 1],
                                 [T ** -sig, T ** -sig * m2 ** (n - 4 * s) * xs ** (4 * s - n)],
                                 T ** -sig * m2 ** (n - 4 * s) * xs ** (2 * s - n))
            lo, hi = sc.mub[j + 1], sc.mub[j]
            amp = T ** -sig * sc.mu[j] ** (n / 2 - 2 * s)
            return np.select([x <= lo, x <= hi],
                             [T ** -sig * sc.mu[j - 1] ** (s - n / 2), amp * sc.mu[j - 1] ** -s * xs ** (4 * s - n)],
                             amp * sc.mu[j - 2] ** s * xs ** (2 * s - n))
        pre = T ** (dl * (n - 4 * s))
        m1 = sc.mub[1]
        return pre * np.select([x <= m1, x <= top],
                               [T ** (-1 - sig) * m1 ** (4 * s - n), T ** (-1 - sig) * xs ** (4 * s - n)],
                               T ** -sig * xs ** (2 * s - n))


def weight_pieces(fam):
    """Power-law majorant of the family in (|x|, t), used as the Duhamel source's majorant."""
    P = fam.params
    n, s, sig, al_w, dl = P.n, P.s, P.sigma, P.alpha_w, P.delta
    al = alpha_exponents(P)
    be = beta_coefficients(P, fam.c)
    j, g = fam.j, fam.gamma
    gd = P.scaling_dim

    def mub(i):
        # bar mu_{0,i} = coef * t^exp
        if i == 1:
            return 1.0, dl
        return math.sqrt(be[i - 1] * be[i - 2]), -(al[i - 1] + al[i - 2]) / 2

    if fam.id == "w11":
        return (PowerPiece(1.0, g, 0.0, 0.0, 0.0, 1.0, 0.0),
                PowerPiece(1.0, g, 2 * s + al_w, 1.0, 0.0, 2.0, dl))
    if fam.id == "w11p":
        return (PowerPiece(1.0, g + dl * (n - 2 * s - al_w), n + s, 1.0, dl, 1.0, 1 / (2 * s)),
                PowerPiece(1.0, g, n + 2 * s, 1.0, 1 / (2 * s)))
    if fam.id == "w1j":
        cb, eb = mub(j)
        k0 = be[j - 2] ** -gd
        return (PowerPiece(k0 * be[j - 1] ** (-2 * s), g + 2 * s * al[j - 1], 0.0, 0.0, 0.0, be[j - 1], -al[j - 1]),
                PowerPiece(k0 * be[j - 1] ** al_w, g - al_w * al[j - 1], 2 * s + al_w, be[j - 1], -al[j - 1],
                           2 * cb, eb))
    if fam.id == "w1jp":
        cb, eb = mub(j)
        return (PowerPiece(be[j - 1] ** n, g - n * al[j - 1], n + 2 * s, cb, eb),)
    if fam.id == "w1jpp":
        cb, eb = mub(j)
        return (PowerPiece(cb ** n, g + n * eb, n + 2 * s, cb, eb),)
    if fam.id == "w2j":
        c_lo, e_lo = mub(j + 1)
        c_hi, e_hi = (1.0, 0.0) if j == 1 else mub(j)
        coef = be[j] ** (n / 2 - 2 * s) * be[j - 1] ** -s
        b = -sig - al[j] * (n / 2 - 2 * s) + s * al[j - 1]
        return (PowerPiece(coef, b, n - 2 * s, c_lo, e_lo, c_hi, e_hi),)
    return (PowerPiece(1.0, dl * (n - 4 * s) - 1 - sig, n - 2 * s, 1.0, dl),)


@dataclass(frozen=True)
class _WeightFun:
    fam: WeightFamily

    def __call__(self, y, l):
        return weight_value(self.fam, y, l)


def weight_source(fam):
    return SpaceTimeSource(weight_pieces(fam), _WeightFun(replace(fam, star=False)), vectorized=True)


def all_families(params, c, star=False):
    k = params.k
    fams = [WeightFamily("w11", 1, params, c, star), WeightFamily("w11p", 1, params, c, star)]
    for j in range(2, k + 1):
        fams += [WeightFamily(i, j, params, c, star) for i in ("w1j", "w1jp", "w1jpp")]
    fams += [WeightFamily("w2j", j, params, c, star) for j in range(1, k)]
    fams.append(WeightFamily("w3", 1, params, c, star))
    return fams


def weight_sum(x_abs, t, params, c, star=False):
    """Sum of the whole catalog (the outer norm's weight)."""
    x = np.asarray(x_abs, dtype=float)
    return sum(weight_value(f, x, t) for f in all_families(params, c, star))


# ---------------------------------------------------------------- bound certification

@dataclass(frozen=True)
class GridSpec:
    per_region: int = 24
    t_lo: float = 1e3
    t_hi: float = 1e4
    t_per_decade: int = 6

    def times(self):
        m = max(1, int(round(math.log10(self.t_hi / self.t_lo) * self.t_per_decade))) + 1
        return np.geomspace(self.t_lo, self.t_hi, m)


@dataclass
class BoundReport:
    case_id: str
    hypotheses: dict
    sample_grid: list
    ratios: np.ndarray
    sup_ratio: float
    region_sup: dict
    refinement_drift: float
    boundary_sup: bool = False
    grid: dict = field(default_factory=dict)
    values: Optional[np.ndarray] = None
    bounds: Optional[np.ndarray] = None

    def to_json(self, path):
        out = {"case_id": self.case_id, "hypotheses": self.hypotheses, "sup_ratio": self.sup_ratio,
               "per_region_sup_ratio": self.region_sup, "refinement_drift": self.refinement_drift,
               "boundary_sup": self.boundary_sup, "grid": self.grid}
        Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")

    def to_csv(self, path):
        lines = ["region,x,t,u,bound,ratio"]
        for (reg, x, t), u, b, r in zip(self.sample_grid, self.values, self.bounds, self.ratios):
            lines.append(f"{reg},{x:.17g},{t:.17g},{u:.17g},{b:.17g},{r:.17g}")
        Path(path).write_text("\n".join(lines) + "\n")


B1_EXPONENTS = ("n+2s", "n+s", "n-2s", "2s+alpha", "0")


def _a_value(name, params):
    n, s = params.n, params.s
    table = {"n+2s": n + 2 * s, "n+s": n + s, "n-2s": n - 2 * s, "2s+alpha": 2 * s + params.alpha_w, "0": 0.0}
    if name not in table:
        raise HypothesisViolated(f"exponent a must be one of {B1_EXPONENTS}, got {name!r}")
    return table[name]


def _gate(cond, text):
    if not cond:
        raise HypothesisViolated(text)


def _b1_setup(cp, params, far):
    n, s = params.n, params.s
    name = str(cp["a"])
    a = _a_value(name, params)
    b, c1, d1, c2, d2 = (float(cp[k]) for k in ("b", "c1", "d1", "c2", "d2"))
    hyp = {}
    _gate(n > 6 * s, f"bound needs n > 6s: n={n}, 6s={6 * s:g}")
    _gate(0 <= c1 <= c2 and c2 > 0 and math.isfinite(c2), f"need 0 <= c1 <= c2 < inf, got c1={c1}, c2={c2}")
    _gate(d1 <= d2 <= 1 / (2 * s), f"need d1 <= d2 <= 1/(2s), got d1={d1}, d2={d2}")
    if name in ("n+2s", "n+s"):
        _gate(c1 > 0, "a >= n needs c1 > 0 for an integrable source")
        lhs = n / (2 * s) - b + d1 * (a - n)
        _gate(lhs > 1, f"n/(2s) - b + d1(a-n) > 1 fails: {lhs:.6g}")
    else:
        lhs = n / (2 * s) - b + d2 * (a - n)
        _gate(lhs > 1, f"n/(2s) - b + d2(a-n) > 1 fails: {lhs:.6g}")
    hyp["b1_condition"] = lhs
    # a source reaching the origin with a > 2s has an unbounded image at x = 0
    _gate(c1 > 0 or a <= 2 * s, f"c1 = 0 with a = {a:g} > 2s makes the image unbounded at the origin")
    src = power_source(b, a, c1, d1, c2, d2)
    if not far:
        d = d2 if name == "0" else d1
        bound = lambda x, t: t ** (b + d * (2 * s - a)) * np.ones_like(x)
        regions = lambda t: _b1_regions(t, c1, d1, c2, d2)
        return src, bound, regions, hyp
    if name in ("0", "n-2s", "2s+alpha"):
        _gate(b + d2 * (n - a) < 0, f"far field needs b + d2(n-a) < 0: {b + d2 * (n - a):.6g}")
        e, cc, dd = b + d2 * (n - a), c2, d2
    else:
        _gate(b < 0 and b + d1 * (n - a) < 0, "far field needs b < 0 and b + d1(n-a) < 0")
        e, cc, dd = b + d1 * (n - a), c1, d1
    start = (lambda t: 2 * cc * (2 * t) ** dd) if dd > 0 else (lambda t: 2 * cc * t ** dd)
    bound = lambda x, t: t ** e * x ** (2 * s - n)
    regions = lambda t: {"far": (1.01 * start(t), 100 * start(t))}
    return src, bound, regions, hyp


def _b1_regions(t, c1, d1, c2, d2):
    lo, hi = c1 * t ** d1, c2 * t ** d2
    out = {}
    if lo > 0:
        out["inside_hole"] = (1e-2 * lo, 0.95 * lo)
        out["support"] = (1.05 * lo, 0.95 * hi)
    else:
        out["support"] = (1e-3 * hi, 0.95 * hi)
    out["outside"] = (1.05 * hi, 8 * hi)
    return out


def _b3_setup(cp, params):
    n, s = params.n, params.s
    name = str(cp["a"])
    _gate(name in ("n-2s", "2s+alpha"), f"B3 needs a in (n-2s, 2s+alpha), got {name}")
    a = _a_value(name, params)
    b, c2, d2 = float(cp["b"]), float(cp["c2"]), float(cp["d2"])
    _gate(d2 <= 1 / (2 * s), f"need d2 <= 1/(2s), got {d2}")
    _gate(c2 > 0, "need c2 > 0")
    if b > 0:
        _gate(n / (2 * s) - b > 1, f"n/(2s) - b > 1 fails for b > 0: {n / (2 * s) - b:.6g}")
    lhs = n / (2 * s) - b + d2 * (a - n)
    _gate(lhs > 1, f"n/(2s) - b + d2(a-n) > 1 fails: {lhs:.6g}")
    src = power_source(b, a, 0.0, 0.0, c2, d2)
    bound = lambda x, t: t ** b * x ** (2 * s - a)
    regions = lambda t: {"inner": (1e-3 * c2 * t ** d2, 0.95 * c2 * t ** d2),
                         "shell": (1.05 * c2 * t ** d2, 7.9 * c2 * t ** d2)}
    return src, bound, regions, {"b1_condition": lhs}


def _b5_setup(cp, params):
    n, s = params.n, params.s
    name = str(cp["a"])
    b = float(cp["b"])
    if name == "n-2s":
        _gate(-2 < b < 0, f"a = n-2s needs -2 < b < 0, got {b}")
    elif name == "n+2s":
        _gate(b < 0, f"a = n+2s needs b < 0, got {b}")
    else:
        raise HypothesisViolated(f"B5 needs a in (n-2s, n+2s), got {name}")
    a = _a_value(name, params)
    src = power_source(b, a, 1.0, 1 / (2 * s))

    def bound(x, t):
        top = t ** (1 / (2 * s))
        inner = t ** (1 + b - a / (2 * s))
        if name == "n+2s":
            outer = t ** b * x ** (2 * s - a)
        elif b < -1:
            outer = x ** -a * t ** (1 + b)
        elif b == -1:
            outer = x ** -a * (1 + np.log(x ** (2 * s) / t))
        else:
            outer = x ** -a * (x ** (2 * s)) ** (1 + b)
        return np.where(x <= top, inner, outer)

    regions = lambda t: {"inside": (1e-2 * t ** (1 / (2 * s)), 0.95 * t ** (1 / (2 * s))),
                         "outside": (1.05 * t ** (1 / (2 * s)), 100 * t ** (1 / (2 * s)))}
    return src, bound, regions, {"b": b, "a": name}


def _star_regions(fam, t):
    P = fam.params
    sc = _scales(P, fam.c, t)
    s = P.s
    top = sc.T ** (1 / (2 * s))
    j = fam.j
    if fam.id == "w11":
        m1 = sc.mub[1]
        return {"core": (1e-2, 0.95), "mid": (1.05, 1.95 * m1), "far": (2.05 * m1, 100 * m1)}
    if fam.id == "w11p":
        m1 = sc.mub[1]
        return {"inner": (1e-2 * m1, 0.95 * m1), "outer": (1.05 * m1, 10 * top)}
    if fam.id == "w1j":
        mb = sc.mub[j]
        return {"inner": (1e-2 * sc.mu[j - 1], 3.9 * mb), "outer": (4.1 * mb, 100 * mb)}
    if fam.id in ("w1jp", "w1jpp"):
        mb = sc.mub[j]
        return {"inner": (1e-2 * mb, 0.95 * mb), "outer": (1.05 * mb, 100 * mb)}
    if fam.id == "w2j":
        lo = sc.mub[j + 1]
        hi = 1.0 if j == 1 else sc.mub[j]
        return {"inner": (1e-2 * lo, 0.95 * lo), "mid": (1.05 * lo, 0.95 * hi), "outer": (1.05 * hi, 100 * hi)}
    m1 = sc.mub[1]
    return {"inner": (1e-2 * m1, 0.95 * m1), "mid": (1.05 * m1, 0.95 * top), "outer": (1.05 * top, 100 * top)}


def _l51_setup(cp, params, c):
    fam = WeightFamily(str(cp["family"]), int(cp.get("j", 1)), params, float(c))
    star = replace(fam, star=True)
    src = weight_source(fam)
    bound = lambda x, t: weight_star_value(star, x, t)
    regions = lambda t: _star_regions(fam, t)
    return src, bound, regions, {"family": fam.label()}


def _sample(job):
    src, x, t, params, cfg = job
    return float(duhamel_conv(src, x, t, params, cfg))


def _evaluate(jobs, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_sample, jobs, chunksize=4))
    return [_sample(j) for j in jobs]


def check_convolution_bound(case, case_params, grid_spec, params, cfg, c=None, workers=1):
    """Duhamel image of a model source divided by its claimed bound, region by region."""
    grid_spec = grid_spec or GridSpec()
    if case in ("B1", "B1_far"):
        src, bound, regions, hyp = _b1_setup(case_params, params, far=case == "B1_far")
    elif case == "B3":
        src, bound, regions, hyp = _b3_setup(case_params, params)
    elif case == "B5":
        src, bound, regions, hyp = _b5_setup(case_params, params)
    elif case == "L51_family":
        if c is None:
            raise ValidationError("L51_family needs the matching constant")
        src, bound, regions, hyp = _l51_setup(case_params, params, c)
    else:
        raise ValidationError(f"unknown case {case!r}")
    samples = []
    for t in grid_spec.times():
        for name, (lo, hi) in regions(float(t)).items():
            if not hi > lo > 0:
                continue
            for x in np.geomspace(lo, hi, grid_spec.per_region):
                samples.append((name, float(x), float(t)))
    if not samples:
        raise ValidationError("the requested grid has no admissible sample points")
    coarse = np.array(_evaluate([(src, x, t, params, cfg) for _, x, t in samples], workers))
    fine_cfg = cfg.refined()
    fine = np.array(_evaluate([(src, x, t, params, fine_cfg) for _, x, t in samples], workers))
    bnd = np.array([float(bound(np.array(x), t)) for _, x, t in samples])
    ratios = coarse / bnd
    ratios_f = fine / bnd
    region_sup = {}
    boundary = False
    names = sorted({nm for nm, _, _ in samples})
    for nm in names:
        sel = np.array([s[0] == nm for s in samples])
        region_sup[nm] = float(np.max(ratios[sel]))
    # the sup over every sample and its location in the per-(region, t) sweep
    i = int(np.argmax(ratios))
    pos = sum(1 for s in samples[:i] if s[0] == samples[i][0] and s[2] == samples[i][2])
    boundary = pos in (0, grid_spec.per_region - 1)
    sup_c, sup_f = float(np.max(ratios)), float(np.max(ratios_f))
    drift = max(sup_c / sup_f, sup_f / sup_c) if sup_c > 0 and sup_f > 0 else math.inf
    hyp = dict(hyp, case=case, **{k: (v if isinstance(v, (int, float, str)) else str(v))
                                   for k, v in case_params.items()})
    return BoundReport(case, hyp, samples, ratios, sup_c, region_sup, drift, boundary,
                       asdict(grid_spec), coarse, bnd)


# ---------------------------------------------------------------- regional domination

def _sum_star(x, t, params, c, ids=None):
    fams = [f for f in all_families(params, c, star=True) if ids is None or f.id in ids]
    return sum(weight_star_value(f, x, t) for f in fams)


def _domination_rows(params, c, t):
    sc = _scales(params, c, t)
    k, s = params.k, params.s
    top = sc.T ** (1 / (2 * s))
    W = lambda fid, j: WeightFamily(fid, j, params, c, True)
    rows = []
    # sums of w1*, w1'*, w1''* and w3*
    lhs20 = lambda x: _sum_star(x, t, params, c, ("w11", "w11p", "w1j", "w1jp", "w1jpp", "w3"))
    rows.append(("a20_core", (1e-2 * sc.mub[k], sc.mub[k]), lhs20, [W("w1jpp", k)]))
    for i in range(2, k):
        rows.append((f"a20_shell{i}", (sc.mub[i + 1], sc.mub[i]), lhs20, [W("w1jpp", i), W("w1jpp", i + 1)]))
    rows.append(("a20_outer", (sc.mub[2], top), lhs20, [W("w11", 1), W("w3", 1), W("w1jpp", 2)]))
    rows.append(("a20_far", (top, 100 * top), lhs20, [W("w3", 1)]))
    lhs21 = lambda x: _sum_star(x, t, params, c, ("w2j",))
    rows.append(("a21_core", (1e-2 * sc.mub[k], sc.mub[k]), lhs21, [W("w2j", k - 1)]))
    for i in range(2, k):
        rows.append((f"a21_shell{i}", (sc.mub[i + 1], sc.mub[i]), lhs21, [W("w2j", i), W("w2j", i - 1)]))
    rows.append(("a21_outer", (sc.mub[2], sc.mub[1]), lhs21, [W("w2j", 1)]))
    rows.append(("a21_far", (sc.mub[1], 100 * top), lhs21, [W("w3", 1)]))
    return rows


def weight_domination_report(t_samples, params, c, per_region=24):
    """Per region: sup of (sum of starred families) / (listed dominators), at each sample time."""
    if params.k < 2:
        raise ValidationError("regional domination needs k >= 2")
    out = {}
    for t in t_samples:
        for name, (lo, hi), lhs, rhs in _domination_rows(params, c, float(t)):
            if not hi > lo:
                continue
            x = np.geomspace(lo, hi, per_region)
            den = sum(weight_star_value(f, x, t) for f in rhs)
            ratio = float(np.max(lhs(x) / den))
            out.setdefault(name, {})[repr(float(t))] = ratio
    summary = {}
    for name, by_t in out.items():
        vals = np.array(list(by_t.values()))
        summary[name] = {"by_t": by_t, "sup": float(vals.max()),
                         "spread": float(vals.max() / vals.min()) if vals.min() > 0 else math.inf}
    return summary
