import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.integrate import quad
from scipy.special import beta as beta_fn
from scipy.special import betainc

from bubbletower.errors import HypothesisViolated, TailUnclosable, ValidationError
from bubbletower.frac_core import QuadratureConfig, make_params
from bubbletower.kernel_engine import (GridSpec, _angular, _space_integral, all_families, check_convolution_bound,
                                       duhamel_conv, heat_kernel, kernel_mass, power_source, weight_sum,
                                       weight_value)
from bubbletower.param_dynamics import matching_constant
from bubbletower.quadrature import sphere_area

CFG = QuadratureConfig()


def sphere_angular(n, s, r, rho, tau):
    # integral over the unit sphere of the kernel at x - rho w, |x| = r, by quad in the polar angle
    b = n + 2 * s
    w = tau ** (1 / s)
    f = lambda th: np.sin(th) ** (n - 2) * (w + r * r + rho * rho - 2 * r * rho * np.cos(th)) ** (-b / 2)
    return tau * sphere_area(n - 1) * quad(f, 0, np.pi, limit=400, epsabs=0, epsrel=1e-12)[0]


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 8), s=st.floats(0.3, 0.95), logt=st.floats(-3, 3))
def test_kernel_mass_time_independent(n, s, logt):
    assume(n > 2 * s)
    P = make_params(n, s, 1, 10.0, smalls={"delta": 1e-3})
    t = 10 ** logt
    w = t ** (1 / (2 * s))
    # in u = log(r / w) the integrand is smooth with exponential tails on both sides
    f = lambda u: heat_kernel(w * np.exp(u), t, P) * (w * np.exp(u)) ** n
    val = sphere_area(n) * sum(quad(f, lo, hi, limit=200, epsabs=0, epsrel=1e-12)[0]
                               for lo, hi in ((-60, -5), (-5, 5), (5, min(40 / s, 600 / n))))
    assert val == pytest.approx(kernel_mass(P), rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 8), s=st.floats(0.05, 0.95), x=st.floats(0, 50), t=st.floats(1e-3, 1e3), lam=st.floats(0.1, 10))
def test_kernel_self_similar(n, s, x, t, lam):
    # K(lam x, lam^(2s) t) = lam^(-n) K(x, t)
    P = make_params(n, s, 1, 10.0, smalls={"delta": 1e-3})
    assert heat_kernel(lam * x, lam ** (2 * s) * t, P) == pytest.approx(lam ** -n * heat_kernel(x, t, P), rel=1e-9)


@pytest.mark.parametrize("n,s", [(3, 0.4), (4, 0.5), (7, 0.9)])
@pytest.mark.parametrize("r,rho,tau", [(1.0, 0.5, 0.3), (2.0, 2.1, 1e-2), (0.3, 5.0, 4.0), (1.0, 1.0, 1e-4)])
def test_angular_reduction(n, s, r, rho, tau):
    got = float(_angular(r, np.array([rho]), np.array([tau]), n, s)[0])
    assert got == pytest.approx(sphere_angular(n, s, r, rho, tau), rel=1e-6)


def test_space_integral_at_origin():
    n, s = 4, 0.5
    b = n + 2 * s
    src = power_source(-1.5, 3.0, 0.0, 0.0, 1.0, 1.0)
    for tau in (1e-2, 1.0, 100.0):
        l = 100 + tau
        f = lambda r: sphere_area(n) * tau * (tau ** (1 / s) + r * r) ** (-b / 2) * r ** (n - 1) * l ** -1.5 * r ** -3
        e = np.concatenate([[0], np.geomspace(1e-8, l, 60)])
        want = sum(quad(f, lo, hi, epsabs=0, epsrel=1e-13, limit=200)[0] for lo, hi in zip(e[:-1], e[1:]))
        # default panel order sits inside tol; doubling it converges to round-off
        assert _space_integral(src, 0.0, tau, l, n, s, 8, 1e-12) == pytest.approx(want, rel=CFG.tol)
        assert _space_integral(src, 0.0, tau, l, n, s, 16, 1e-12) == pytest.approx(want, rel=1e-9)


def origin_oracle(n, s, a, b, c1, d1, c2, d2, t):
    # at x = 0 the space integral of the kernel against |y|^-a on c1 l^d1 < |y| < c2 l^d2 is an
    # incomplete beta function after y^2 = tau^(1/s) u; the time integral is done by quad
    be = n + 2 * s
    m = (n - a) / 2
    q = be / 2 - m

    def F(A, B):
        wa, wb = A / (1 + A), B / (1 + B)
        return beta_fn(m, q) * (betainc(m, q, wb) - betainc(m, q, wa))

    def integrand(l):
        tau = l - t
        return l ** b * tau ** (-a / (2 * s)) * F(c1 ** 2 * l ** (2 * d1) / tau ** (1 / s),
                                                  c2 ** 2 * l ** (2 * d2) / tau ** (1 / s))
    edges = t + np.concatenate([[0], np.geomspace(1e-8, 1e8, 33)])
    val = sum(quad(integrand, lo, hi, limit=200, epsabs=0, epsrel=1e-12)[0] for lo, hi in zip(edges[:-1], edges[1:]))
    val += quad(integrand, edges[-1], np.inf, limit=200)[0]
    return sphere_area(n) / 2 * val


def test_duhamel_at_origin_matches_beta_oracle():
    P = make_params(4, 0.5, 1, 10.0)
    src = power_source(-1.5, 3.0, 1.0, 0.0, 1.0, 1.0)
    got = duhamel_conv(src, 0.0, 100.0, P, CFG)
    # frozen from origin_oracle(4, 0.5, 3, -1.5, 1, 0, 1, 1, 100)
    assert got == pytest.approx(3.199330120e-3, rel=1e-5)
    assert origin_oracle(4, 0.5, 3.0, -1.5, 1.0, 0.0, 1.0, 1.0, 100.0) == pytest.approx(3.199330120e-3, rel=1e-8)


def test_duhamel_continuous_at_origin():
    P = make_params(4, 0.5, 1, 10.0)
    src = power_source(-1.5, 3.0, 1.0, 0.0, 1.0, 1.0)
    v = duhamel_conv(src, [0.0, 1e-3], 100.0, P, CFG)
    assert v[1] == pytest.approx(v[0], rel=1e-3)


def test_ancient_is_time_reflection():
    P = make_params(4, 0.5, 1, 10.0)
    src = power_source(-1.5, 3.0, 1.0, 0.0, 1.0, 1.0)
    fwd = duhamel_conv(src, [0.5, 5.0], 100.0, P, CFG)
    # the source depends on |l| only through l^b, so reflect it explicitly
    from bubbletower.kernel_engine import SpaceTimeSource
    refl = SpaceTimeSource(src.pieces, lambda y, l: src(y, -l), None, src.vectorized)
    anc = duhamel_conv(refl, [0.5, 5.0], -100.0, P, CFG, ancient=True)
    assert np.allclose(anc, fwd, rtol=1e-12)
    with pytest.raises(ValidationError):
        duhamel_conv(src, 0.5, 100.0, P, CFG, ancient=True)


def test_time_integral_must_close():
    P = make_params(4, 0.5, 1, 10.0)
    with pytest.raises(TailUnclosable):
        # unbounded support: the spatial convolution decays like l^(b - a/2s) = l^-0.7
        duhamel_conv(power_source(-0.2, 0.5), 0.5, 100.0, P, CFG)


def test_b1_hypothesis_gate():
    P = make_params(4, 0.5, 1, 10.0)
    cp = {"a": "n-2s", "b": -2.0, "c1": 0.0, "d1": 0.0, "c2": 1.0, "d2": 0.5}
    with pytest.raises(HypothesisViolated):
        check_convolution_bound("B1", cp, GridSpec(4, 1e3, 1e3, 1), P, CFG)
    with pytest.raises(ValidationError):
        check_convolution_bound("nope", {}, GridSpec(4, 1e3, 1e3, 1), P, CFG)


def test_b5_bound_report(tmp_path):
    P = make_params(7, 0.9, 2, 10.0)
    rep = check_convolution_bound("B5", {"a": "n-2s", "b": -0.5}, GridSpec(6, 1e3, 1e3, 1), P, CFG)
    assert np.isfinite(rep.sup_ratio) and rep.sup_ratio > 0
    assert rep.refinement_drift <= 2
    assert np.all(rep.ratios <= rep.sup_ratio)
    rep.to_json(tmp_path / "b.json")
    rep.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().count("\n") == len(rep.sample_grid) + 1


def test_weight_families_positive():
    P = make_params(7, 0.9, 3, 10.0)
    c = float(matching_constant(P, CFG))
    fams = all_families(P, c)
    assert {f.id for f in fams} >= {"w11", "w3"}
    x = np.geomspace(1e-40, 1e3, 600)
    for f in fams:
        v = weight_value(f, x, 1e4)
        assert np.all(np.isfinite(v)) and np.all(v >= 0) and np.any(v > 0)
    assert np.all(weight_sum(x, 1e4, P, c) > 0)
