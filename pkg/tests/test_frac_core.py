import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.integrate import quad
from scipy.special import gamma, hyp2f1

from bubbletower.errors import IntegralDivergence, ValidationError
from bubbletower.frac_core import (QuadratureConfig, RadialFunction, apply_L0, bubble_alpha, bubble_function,
                                   eigenpair_unstable, frac_laplacian_radial, kernel_elements, l0_matrix,
                                   make_params, potential, radial_grid, radial_inner, radial_integral, sample)

CFG = QuadratureConfig()
CASES = [(3, 0.4), (4, 0.5), (7, 0.9)]


def alpha_closed_form(n, s):
    g = (n - 2 * s) / 2
    return 2 ** g * (gamma((n + 2 * s) / 2) / gamma(g)) ** (g / (2 * s))


def frac_lap_power(n, s, a, r):
    # (-Delta)^s (1+|x|^2)^(-a) in closed form
    return (4 ** s * gamma(a + s) * gamma(n / 2 + s) / (gamma(a) * gamma(n / 2))
            * hyp2f1(a + s, n / 2 + s, n / 2, -r * r))


@pytest.mark.parametrize("n,s", CASES)
def test_alpha_matches_closed_form(n, s):
    P = make_params(n, s, 1, 10.0)
    assert bubble_alpha(P, CFG) == pytest.approx(alpha_closed_form(n, s), rel=1e-8)


@pytest.mark.parametrize("n,s,a", [(3, 0.4, 1.5), (4, 0.5, 1.3), (7, 0.9, 2.0), (1, 0.3, 0.8)])
def test_frac_laplacian_against_hypergeometric(n, s, a):
    P = make_params(n, s, 1, 10.0)
    f = sample(lambda r: (1 + r * r) ** -a, CFG, -2 * a)
    r = np.array([0.0, 0.3, 1.0, 3.0, 10.0])
    num = frac_laplacian_radial(f, r, P, CFG)
    assert np.max(np.abs(num / frac_lap_power(n, s, a, r) - 1)) < 1e-6


@pytest.mark.parametrize("n,s", CASES)
def test_dilation_mode_in_kernel(n, s):
    P = make_params(n, s, 1, 10.0)
    _, z = kernel_elements(P, CFG)
    r = np.geomspace(1e-2, 50, 15)
    lz = apply_L0(z, P, CFG, radii=r)
    scale = np.max(np.abs(potential(r, P, CFG) * z(r)))
    assert np.max(np.abs(lz.values)) / scale < 1e-3


def test_unstable_eigenpair_solves_discrete_problem():
    P = make_params(4, 0.5, 1, 10.0)
    cfg = QuadratureConfig(n_radial=512)
    mu0, z0 = eigenpair_unstable(P, cfg)
    assert mu0 > 0
    A = l0_matrix(P, cfg, z0.tail_exponent)
    res = A @ z0.values - mu0 * z0.values
    assert np.max(np.abs(res)) < 1e-8 * max(1.0, mu0)
    assert np.max(np.abs(z0.values)) == pytest.approx(1.0)


def test_eigenvalue_stable_under_refinement():
    P = make_params(3, 0.4, 1, 10.0)
    a, _ = eigenpair_unstable(P, QuadratureConfig(n_radial=512))
    b, _ = eigenpair_unstable(P, QuadratureConfig(n_radial=1024))
    assert abs(a / b - 1) < 1e-2


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 8), extra=st.floats(0.2, 3.0))
def test_radial_integral_of_power_profile(n, extra):
    # integral of (1+r^2)^(-b) over R^n = pi^(n/2) Gamma(b - n/2) / Gamma(b)
    b = n / 2 + extra
    cfg = QuadratureConfig(n_radial=1024, r_min=1e-5, r_max=1e5)
    r = radial_grid(cfg)
    val = radial_integral((1 + r * r) ** -b, r, n, -2 * b, value_at_zero=1.0)
    exact = math.pi ** (n / 2) * gamma(b - n / 2) / gamma(b)
    assert val == pytest.approx(exact, rel=1e-4)


def test_radial_integral_divergent_tail():
    r = radial_grid(CFG)
    with pytest.raises(IntegralDivergence):
        radial_integral(r ** -2.0, r, 3, -2.0)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 8), s=st.floats(0.1, 0.9), a=st.floats(0.3, 4.0), r=st.floats(0.0, 20.0))
def test_frac_laplacian_property(n, s, a, r):
    assume(n > 2 * s)
    P = make_params(n, s, 1, 10.0, smalls={"delta": 1e-3})
    f = sample(lambda x: (1 + x * x) ** -a, CFG, -2 * a)
    num = frac_laplacian_radial(f, np.array([r]), P, CFG)[0]
    exact = frac_lap_power(n, s, a, r)
    assert abs(num - exact) <= 1e-5 * max(abs(exact), frac_lap_power(n, s, a, 0.0) * (1 + r * r) ** (-n / 2 - s))


@settings(max_examples=40, deadline=None)
@given(s=st.one_of(st.floats(-2, 0), st.floats(1, 3)))
def test_order_out_of_range_rejected(s):
    with pytest.raises(ValidationError):
        make_params(4, s, 1, 10.0)


def test_parameter_validation():
    with pytest.raises(ValidationError):
        make_params(2, 0.5, 2, 10.0)  # tower needs n > 6s
    with pytest.raises(ValidationError):
        make_params(4, 0.5, 1, 0.5)
    with pytest.raises(ValidationError):
        make_params(4, 0.5, 1, 10.0, direction="sideways")
    with pytest.raises(ValidationError):
        make_params(4, 0.5, 1, 10.0, smalls={"bogus": 1})
    with pytest.raises(ValidationError):
        QuadratureConfig(tol=0.5)


def test_pairing_of_bubble_with_dilation_mode():
    # d/dmu of the L^(p+1) norm vanishes, so U^p is orthogonal to Z_(n+1)
    P = make_params(4, 0.5, 1, 10.0)
    U = bubble_function(P, CFG)
    _, z = kernel_elements(P, CFG)
    up = sample(lambda r: U(r) ** P.p, CFG, -(P.n + 2 * P.s))
    ip = radial_inner(up, z, P.n, CFG)
    norm = math.sqrt(radial_inner(up, up, P.n, CFG) * radial_inner(z, z, P.n, CFG, truncate=True))
    assert abs(ip) / norm < 1e-8


def test_radial_function_interpolation_and_tail():
    r = np.geomspace(1e-2, 1e2, 200)
    f = RadialFunction(r, (1 + r * r) ** -1.0, -2.0, 1.0)
    assert f(np.array([0.5]))[0] == pytest.approx(0.8, rel=1e-4)
    assert f(np.array([1e4]))[0] == pytest.approx(1 / (1 + 1e8), rel=1e-3)
