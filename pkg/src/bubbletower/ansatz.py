"""The bubble tower, its first correction, and the pointwise error of the approximate solution.

The error S[u*] mixes terms of size mu_k^(-(n+2s)/2) that cancel to many
digits near each bubble core, so it is assembled semi-analytically: the
fractional Laplacian of every bubble and of every unrestricted correction
comes from the equations they solve, and quadrature is used only for the
part of each correction removed by its cut-off.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ValidationError
from .frac_core import (RadialFunction, _frac_lap_point, bubble_alpha, bubble_profile,
                        dilation_mode, potential, radial_integral, sample, solve_L0_orthogonal)
from .param_dynamics import (TowerScales, alpha_exponents, make_scales, mu0_derivative,
                             mu0_trajectory)

CUTOFF_KINDS = ("base", "chi_j", "eta_j", "zeta_j")


# ---------------------------------------------------------------- cut-offs

def _psi(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(-1.0 / x[pos])
    return out


def bump(x):
    """Smooth monotone step: 1 on (-inf, 1], 0 on [2, inf)."""
    a = _psi(2.0 - np.asarray(x, dtype=float))
    b = _psi(np.asarray(x, dtype=float) - 1.0)
    return a / (a + b)


def bump_slope(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    mid = (x > 1) & (x < 2)
    u, v = 2.0 - x[mid], x[mid] - 1.0
    a, b = np.exp(-1 / u), np.exp(-1 / v)
    # d/dx a = -a/u^2, d/dx b = b/v^2
    out[mid] = -(a * b * (1 / u ** 2 + 1 / v ** 2)) / (a + b) ** 2
    return out


@dataclass(frozen=True)
class CutoffSpec:
    kind: str
    j: int = 1
    R_exponent: float = 0.02

    def __post_init__(self):
        if self.kind not in CUTOFF_KINDS:
            raise ValidationError(f"cut-off kind must be one of {CUTOFF_KINDS}, got {self.kind!r}")
        if self.j < 1:
            raise ValidationError("cut-off index starts at 1")


def mu_bar0(scales, j):
    """Geometric mean of consecutive leading scales; t^delta for j = 1 and 0 past the last."""
    k = scales.k
    if j == 1:
        return float(scales.mu_bar[0])
    if j == k + 1:
        return 0.0
    return math.sqrt(scales.mu0[j - 1] * scales.mu0[j - 2])


def _step(x_abs, scale, factor=1.0):
    # chi(factor |x| / scale) with chi(.) = 0 when scale = 0
    if scale == 0:
        return np.zeros_like(x_abs)
    return bump(factor * x_abs / scale)


def cutoff(spec, x_abs, t, scales):
    x = np.asarray(x_abs, dtype=float)
    k, j = scales.k, spec.j
    if spec.kind == "base":
        return bump(x)
    if j > k:
        raise ValidationError(f"cut-off index {j} exceeds the number of bubbles {k}")
    R = abs(t) ** spec.R_exponent
    mu = scales.mu0[j - 1]
    if spec.kind == "chi_j":
        if j < 2:
            raise ValidationError("chi_j is defined for j >= 2")
        return _step(x, mu_bar0(scales, j), 2.0) - _step(x, mu_bar0(scales, j + 1), 2.0)
    if spec.kind == "eta_j":
        return bump(x / (2 * R * mu))
    if j < k:
        return bump(x / (R * mu)) - bump(R * x / mu)
    return bump(x / (R * mu))


def _chi_j_rate(x, scales, dlog, j):
    """d/dt chi_j given d log mu_0 / dt."""
    out = np.zeros_like(x)
    for jj, sign in ((j, 1.0), (j + 1, -1.0)):
        m = mu_bar0(scales, jj)
        if m == 0:
            continue
        rate = 0.5 * (dlog[jj - 1] + dlog[jj - 2])
        z = 2 * x / m
        out += sign * bump_slope(z) * (-z) * rate
    return out


# ---------------------------------------------------------------- signs and sources

def bubble_sign(j, params):
    """(-1)^(j-1) on forward towers, + on ancient ones."""
    return (-1.0) ** (j - 1) if params.forward else 1.0


def _interaction_sign(params):
    # the previous bubble's height at the core enters h_j with this sign
    return -1.0 if params.forward else 1.0


def correction_sign(j, params):
    """Sign in phi_0j = sign mu_j^(-(n-2s)/2) lambda_0j^((n-2s)/2) phibar(x/mu_j)."""
    return bubble_sign(j, params) if params.forward else -1.0


def source_bar(params, c, cfg):
    """hbar = -p U(0) U^(p-1) - c Z_{n+1}."""
    c = float(c)
    u0 = bubble_alpha(params, cfg)

    def fun(r):
        return -u0 * potential(r, params, cfg) - c * dilation_mode(r, params, cfg)

    return sample(fun, cfg, -4 * params.s)


def source_h(j, y_abs, scales, mu_dot_j, params, cfg=None):
    """h_j(y, mu) built from the current scales and the rate of mu_j.

    On ancient towers the interaction term enters with the opposite sign,
    which keeps h_j proportional to hbar (with factor -lambda^((n-2s)/2)).
    """
    if j < 2:
        raise ValidationError("h_j is defined for j >= 2")
    y = np.asarray(y_abs, dtype=float)
    mu = scales.mu[j - 1]
    lam = scales.mu[j - 1] / scales.mu[j - 2]
    g = params.scaling_dim
    u0 = bubble_alpha(params, cfg)
    return (mu ** (2 * params.s - 1) * mu_dot_j * dilation_mode(y, params, cfg)
            + _interaction_sign(params) * potential(y, params, cfg) * lam ** g * u0)


def correction_phibar(params, cfg, c):
    """Decaying solution of L0 phi + hbar = 0 with no dilation-mode component."""
    hbar = source_bar(params, c, cfg)
    phibar = solve_L0_orthogonal(hbar, params, cfg)
    phibar.meta["c"] = float(c)
    return phibar


def _lam0(scales, j):
    return scales.mu0[j - 1] / scales.mu0[j - 2]


def phi0j(j, x_abs, t, scales, phibar, params):
    """Scaled correction attached to bubble j (before its cut-off)."""
    x = np.asarray(x_abs, dtype=float)
    mu = scales.mu[j - 1]
    amp = correction_sign(j, params) * mu ** -params.scaling_dim * _lam0(scales, j) ** params.scaling_dim
    return amp * phibar(x / mu)


def tower(r, t, scales, params, cfg=None):
    r = np.asarray(r, dtype=float)
    return sum(_bubble(r, j, scales, params, cfg) for j in range(1, scales.k + 1))


def _bubble(r, j, scales, params, cfg=None):
    mu = scales.mu[j - 1]
    return bubble_sign(j, params) * mu ** -params.scaling_dim * bubble_profile(r / mu, params, cfg)


# ---------------------------------------------------------------- approximate solution

@dataclass(frozen=True)
class AnsatzGrid:
    per_decade: int = 24
    inner_factor: float = 1e-3
    r_outer: float = 1e4

    def radii(self, scales):
        lo = self.inner_factor * float(np.min(scales.mu))
        m = int(math.ceil(math.log10(self.r_outer / lo) * self.per_decade)) + 1
        return np.geomspace(lo, self.r_outer, m)

    def refined(self):
        return AnsatzGrid(2 * self.per_decade, self.inner_factor, self.r_outer)


@dataclass
class AnsatzField:
    t: float
    grid: np.ndarray
    ubar: np.ndarray
    phi0: np.ndarray
    ustar: np.ndarray
    residual: Optional[np.ndarray] = None
    scales: Optional[TowerScales] = None
    phibar: Optional[RadialFunction] = None
    meta: dict = field(default_factory=dict)

    def to_csv(self, path):
        path = Path(path)
        res = self.residual if self.residual is not None else np.full_like(self.grid, np.nan)
        lines = ["r,ubar,phi0,ustar,residual"]
        for row in zip(self.grid, self.ubar, self.phi0, self.ustar, res):
            lines.append(",".join(f"{v:.17g}" for v in row))
        path.write_text("\n".join(lines) + "\n")
        path.with_suffix(".json").write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n")


def _pieces(x, t, scales, phibar, params, cfg):
    """Bubbles (k, nx) and cut-off corrections (k, nx); row j-1 holds index j."""
    k = scales.k
    U = np.array([_bubble(x, j, scales, params, cfg) for j in range(1, k + 1)])
    P = np.zeros_like(U)
    for j in range(2, k + 1):
        chi = cutoff(CutoffSpec("chi_j", j), x, t, scales)
        P[j - 1] = phi0j(j, x, t, scales, phibar, params) * chi
    return U, P


def ustar_values(x, t, params, c, phibar, cfg):
    scales = mu0_trajectory(params, c, t)
    U, P = _pieces(np.asarray(x, dtype=float), t, scales, phibar, params, cfg)
    return U.sum(axis=0), P.sum(axis=0)


def ustar_field(t, params, c, cfg, phibar=None, grid=None):
    """u* = tower + cut-off corrections on the explicit trajectory at time t.

    `phibar` defaults to the correction built with the same c; passing one
    built with a different constant decouples the trajectory from the
    correction, which is how the solvability check perturbs c.
    """
    c = float(c)
    scales = mu0_trajectory(params, c, t)
    if phibar is None and scales.k > 1:
        phibar = correction_phibar(params, cfg, c)
    grid = grid or AnsatzGrid()
    x = grid.radii(scales)
    U, P = _pieces(x, t, scales, phibar, params, cfg)
    ubar, phi0 = U.sum(axis=0), P.sum(axis=0)
    meta = {"t": float(t), "c": c, "params": params.to_dict(), "mu0": scales.mu0.tolist(),
            "grid": {"per_decade": grid.per_decade, "inner_factor": grid.inner_factor,
                     "r_outer": grid.r_outer}}
    return AnsatzField(float(t), x, ubar, phi0, ubar + phi0, None, scales, phibar, meta)


# ---------------------------------------------------------------- perturbation terms

@dataclass(frozen=True)
class Mu1State:
    """Perturbations mu_1j and their rates at one time."""
    mu1: np.ndarray
    dmu1: np.ndarray


def mu1_state_at(path, t):
    """Interpolated (mu_1, mu_1') from a ParamPath, linear in log t."""
    x = np.log(np.abs(path.times))
    xt = math.log(abs(t))
    mu1 = path.mu1()
    return Mu1State(np.array([np.interp(xt, x, mu1[:, i]) for i in range(mu1.shape[1])]),
                    np.array([np.interp(xt, x, path.derivatives[:, i]) for i in range(mu1.shape[1])]))


def Dj_term(j, y_abs, t, mu1, params, c, cfg=None):
    """Linear part D_j of the perturbed core error, in the variable y_j."""
    y = np.asarray(y_abs, dtype=float)
    s2 = 2 * params.s
    Z = dilation_mode(y, params, cfg)
    if j == 1:
        return (1 + mu1.mu1[0]) ** (s2 - 1) * mu1.dmu1[0] * Z
    sc = mu0_trajectory(params, c, t)
    dmu0 = mu0_derivative(params, c, t)
    m0, m1 = sc.mu0[j - 1], mu1.mu1[j - 1]
    g = params.scaling_dim
    rate = dmu0[j - 1] * ((m0 + m1) ** (s2 - 1) - m0 ** (s2 - 1)) + mu1.dmu1[j - 1] * (m0 + m1) ** (s2 - 1)
    rel = m1 / m0 - mu1.mu1[j - 2] / sc.mu0[j - 2]
    u0 = bubble_alpha(params, cfg)
    lam0 = _lam0(sc, j)
    return rate * Z + _interaction_sign(params) * g * potential(y, params, cfg) * u0 * lam0 ** g * rel


def theta_term(j, y_abs, t, mu1, params, c, cfg=None):
    """Quadratic remainder Theta_j: the exact difference left after D_j."""
    if j < 2:
        raise ValidationError("Theta_j is defined for j >= 2")
    y = np.asarray(y_abs, dtype=float)
    sc = mu0_trajectory(params, c, t)
    g = params.scaling_dim
    m0 = sc.mu0
    r_j = mu1.mu1[j - 1] / m0[j - 1]
    r_p = mu1.mu1[j - 2] / m0[j - 2]
    lam0 = _lam0(sc, j)
    # lambda^g - lambda0^g - g lambda0^g (r_j - r_p), evaluated without cancellation
    x = math.log1p(r_j) - math.log1p(r_p)
    gap = lam0 ** g * (math.expm1(g * x) - g * x) + g * lam0 ** g * (x - (r_j - r_p))
    u0 = bubble_alpha(params, cfg)
    return _interaction_sign(params) * potential(y, params, cfg) * u0 * gap


# ---------------------------------------------------------------- error of u*

def _f(u, p):
    return np.abs(u) ** (p - 1) * u


def _nonlinear_excess(U, P, p):
    """f(u*) - sum_i f(U_i), expanded around the locally dominant bubble.

    The remainder u* - U_d is summed from the other pieces, since forming it
    from u* loses it entirely inside a concentrated core.
    """
    idx = np.argmax(np.abs(U), axis=0)
    cols = np.arange(U.shape[1])
    Ud = U[idx, cols]
    others = U.copy()
    others[idx, cols] = 0.0
    rest = others.sum(axis=0) + P.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = rest / Ud
    near = np.abs(ratio) < 0.5
    out = np.empty_like(Ud)
    out[near] = _f(Ud[near], p) * np.expm1(p * np.log1p(ratio[near]))
    out[~near] = _f(Ud[~near] + rest[~near], p) - _f(Ud[~near], p)
    return out - _f(others, p).sum(axis=0)


def _time_derivative(x, t, params, c, phibar, cfg):
    sc = mu0_trajectory(params, c, t)
    dmu = mu0_derivative(params, c, t)
    dlog = dmu / sc.mu0
    g = params.scaling_dim
    out = np.zeros_like(x)
    for j in range(1, sc.k + 1):
        mu = sc.mu0[j - 1]
        out += -bubble_sign(j, params) * dmu[j - 1] * mu ** (-g - 1) * dilation_mode(x / mu, params, cfg)
    for j in range(2, sc.k + 1):
        mu = sc.mu0[j - 1]
        y = x / mu
        amp = correction_sign(j, params) * mu ** -g * _lam0(sc, j) ** g
        # the amplitude equals sign * mu_{j-1}^-g, whose rate is -g dlog mu_{j-1}
        dphi = amp * (-g * dlog[j - 2] * phibar(y) - dlog[j - 1] * phibar.log_slope(y))
        chi = cutoff(CutoffSpec("chi_j", j), x, t, sc)
        out += dphi * chi + amp * phibar(y) * _chi_j_rate(x, sc, dlog, j)
    return out


def _time_derivative_fd(x, t, params, c, phibar, cfg, rel_step=1e-3):
    h = rel_step * abs(t)
    up = sum(ustar_values(x, t + h, params, c, phibar, cfg))
    dn = sum(ustar_values(x, t - h, params, c, phibar, cfg))
    return (up - dn) / (2 * h)


def _cut_remainder_laplacian(x, j, t, sc, phibar, params, cfg):
    """(-Delta)^s of phi_0j (1 - chi_j), computed in the variable y = x / mu_j."""
    mu = sc.mu0[j - 1]
    k = sc.k
    g = params.scaling_dim
    amp = correction_sign(j, params) * mu ** -g * _lam0(sc, j) ** g
    lo_cut = mu_bar0(sc, j + 1) / mu
    hi_cut = mu_bar0(sc, j) / mu

    lo = 0.25 * lo_cut if j < k else 1.0
    # tabulated in log y: the cut-off's transitions sit inside [lo, 4 hi_cut]
    ys = np.geomspace(1e-3 * min(lo, 1.0), 4 * max(hi_cut, 1.0), 4096)
    spline = CubicSpline(np.log(ys), phibar(ys) * (1.0 - cutoff(CutoffSpec("chi_j", j), ys * mu, t, sc)))

    def G(y):
        y = np.asarray(y, dtype=float)
        out = phibar(y)
        inside = y <= ys[-1]
        out[inside] = spline(np.log(np.maximum(y[inside], ys[0])))
        return out

    scales = (min(lo, 1.0), max(hi_cut, 1.0))
    vals = np.array([_frac_lap_point(G, float(yy), params.n, params.s, cfg, scales, phibar.tail_exponent)
                     for yy in x / mu])
    return amp * mu ** (-2 * params.s) * vals


def residual_S(field, params, c, cfg, dt_mode="analytic"):
    """S[u*] = d/dt u* + (-Delta)^s u* - f(u*) on the field's grid.

    The correction's own equation L0 phibar + hbar = 0 is used as an
    identity; hbar is rebuilt with the constant phibar was solved for.
    """
    if dt_mode not in ("analytic", "finite_difference"):
        raise ValidationError(f"dt_mode must be analytic or finite_difference, got {dt_mode!r}")
    x, t = field.grid, field.t
    sc = field.scales
    phibar = field.phibar
    p, g, s = params.p, params.scaling_dim, params.s
    if dt_mode == "analytic":
        dt = _time_derivative(x, t, params, c, phibar, cfg)
    else:
        dt = _time_derivative_fd(x, t, params, c, phibar, cfg)
    lap = np.zeros_like(x)
    if sc.k > 1:
        hbar = source_bar(params, phibar.meta.get("c", c), cfg)
        for j in range(2, sc.k + 1):
            mu = sc.mu0[j - 1]
            y = x / mu
            amp = correction_sign(j, params) * mu ** -g * _lam0(sc, j) ** g
            full = amp * mu ** (-2 * s) * (potential(y, params, cfg) * phibar(y) + hbar(y))
            lap += full - _cut_remainder_laplacian(x, j, t, sc, phibar, params, cfg)
    U, P = _pieces(x, t, sc, phibar, params, cfg)
    excess = _nonlinear_excess(U, P, p)
    # (-Delta)^s U_j = f(U_j) exactly, so the bubbles enter only through the excess
    res = dt + lap - excess
    field.residual = res
    field.meta["dt_mode"] = dt_mode
    q = -2 * s - 2 * s
    return RadialFunction(x, res, q, float(res[0]), meta={"t": t, "dt_mode": dt_mode})


def dilation_projection(field, j, params, cfg=None):
    """Integral of S[u*] against Z_{n+1}(x / mu_j) over the sampled range."""
    if field.residual is None:
        raise ValidationError("residual not computed on this field")
    mu = field.scales.mu0[j - 1]
    vals = field.residual * dilation_mode(field.grid / mu, params, cfg)
    return radial_integral(vals, field.grid, params.n, -params.n, truncate=True)


# ---------------------------------------------------------------- structure diagnostics

def crossing_radii(x, scales, params, cfg=None):
    """Radii where |U_j| = |U_(j+1)|, by log-linear interpolation of the sign change."""
    out = []
    for j in range(1, scales.k):
        d = np.log(np.abs(_bubble(x, j, scales, params, cfg))) - np.log(np.abs(_bubble(x, j + 1, scales, params, cfg)))
        idx = np.nonzero(np.diff(np.sign(d)) != 0)[0]
        if len(idx) == 0:
            out.append(float("nan"))
            continue
        i = idx[0]
        lx = np.log(x)
        w = d[i] / (d[i] - d[i + 1])
        out.append(float(math.exp(lx[i] + w * (lx[i + 1] - lx[i]))))
    return np.array(out)


def domination_ratio(x, t, scales, phibar, params, cfg=None):
    """sup |phi_0| / sum_j lambda_j^s |U_j| chi_j over points where the denominator is positive."""
    s = params.s
    # the ratio peaks at the support edges of chi_j, so those are always sampled
    edges = []
    for j in range(2, scales.k + 1):
        edges.append(mu_bar0(scales, j) * (1 - 1e-3))
        if j < scales.k:
            edges.append(0.5 * mu_bar0(scales, j + 1) * (1 + 1e-3))
    x = np.union1d(np.asarray(x, dtype=float), edges)
    U, P = _pieces(x, t, scales, phibar, params, cfg)
    den = np.zeros_like(x)
    for j in range(2, scales.k + 1):
        chi = cutoff(CutoffSpec("chi_j", j), x, t, scales)
        den += _lam0(scales, j) ** s * np.abs(U[j - 1]) * chi
    num = np.abs(P.sum(axis=0))
    ok = den > 0
    if not np.any(ok):
        return float("nan")
    return float(np.max(num[ok] / den[ok]))


def structure_report(t, params, c, cfg, times=(1e4, 1e5), grid=None, phibar=None):
    """Crossing radii, correction domination and the error-to-weight ratio."""
    from .kernel_engine import weight_sum

    grid = grid or AnsatzGrid()
    c = float(c)
    if phibar is None:
        phibar = correction_phibar(params, cfg, c)
    sc = mu0_trajectory(params, c, t)
    x = grid.radii(sc)
    h = math.log(x[1] / x[0])
    cross = crossing_radii(x, sc, params, cfg)
    target = np.sqrt(sc.mu0[1:] * sc.mu0[:-1])
    log_err = np.abs(np.log(cross / target))
    dom = domination_ratio(x, t, sc, phibar, params, cfg)
    dom_fine = domination_ratio(grid.refined().radii(sc), t, sc, phibar, params, cfg)
    ratios = {}
    for tt in times:
        tt = float(tt) if params.forward else -abs(float(tt))
        fld = ustar_field(tt, params, c, cfg, phibar=phibar, grid=grid)
        res = residual_S(fld, params, c, cfg)
        w = weight_sum(fld.grid, tt, params, c)
        ratios[repr(float(tt))] = float(np.max(np.abs(res.values) / w))
    vals = list(ratios.values())
    return {
        "t": float(t),
        "crossing_radii": cross.tolist(),
        "crossing_targets": target.tolist(),
        "crossing_log_error": log_err.tolist(),
        "grid_log_spacing": h,
        "crossings_within_spacing": bool(np.all(log_err <= h)),
        "domination_ratio": dom,
        "domination_ratio_refined": dom_fine,
        "residual_weight_ratio": ratios,
        "ratio_non_increasing": bool(all(b <= a for a, b in zip(vals[:-1], vals[1:]))),
    }
