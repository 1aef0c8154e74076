import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.integrate import quad
from scipy.special import gamma

from bubbletower.errors import DecayViolated, DegenerateFit, ValidationError
from bubbletower.frac_core import QuadratureConfig, make_params
from bubbletower.param_dynamics import (alpha_exponents, beta_coefficients, fit_power_law,
                                        integrate_reduced_ode, make_scales, matching_constant,
                                        mu0_derivative, mu0_trajectory, reduced_ode_rhs,
                                        solve_linearized_params)


def c_by_quadrature(n, s):
    # U(0) ((n-2s)/2) int U^p / int Z^2 with scipy quad on the closed forms
    g, p = (n - 2 * s) / 2, (n + 2 * s) / (n - 2 * s)
    a = 2 ** g * (gamma((n + 2 * s) / 2) / gamma(g)) ** (g / (2 * s))
    U = lambda r: a * (1 + r * r) ** -g
    Z = lambda r: g * a * (1 - r * r) * (1 + r * r) ** (-g - 1)
    mass = quad(lambda r: U(r) ** p * r ** (n - 1), 0, np.inf, limit=400)[0]
    znorm = quad(lambda r: Z(r) ** 2 * r ** (n - 1), 0, np.inf, limit=400)[0]
    return a * g * mass / znorm


# frozen from c_by_quadrature
C_FROZEN = {(3, 0.4): 7.765121952304743, (4, 0.5): 15.999999999999996, (7, 0.9): 137.1110696659033}


@pytest.mark.parametrize("n,s", sorted(C_FROZEN))
def test_matching_constant_oracle(n, s):
    m = matching_constant(make_params(n, s, 1, 10.0))
    assert m.c == pytest.approx(C_FROZEN[(n, s)], rel=1e-8)
    assert m.c == pytest.approx(c_by_quadrature(n, s), rel=1e-8)
    assert m.discrepancy < 1e-3


tower_dims = st.tuples(st.integers(3, 12), st.floats(0.05, 0.95), st.integers(2, 4)).filter(
    lambda x: x[0] > 6 * x[1] + 0.5)


def _params(n, s, k, direction="forward"):
    return make_params(n, s, k, 10.0, direction, smalls={"delta": 1e-3})


@settings(max_examples=60, deadline=None)
@given(tower_dims)
def test_alpha_recursion(dims):
    # power-law balance gives alpha_j = (g alpha_(j-1) + 1) / (g - 2s)
    n, s, k = dims
    P = _params(n, s, k)
    al = alpha_exponents(P)
    g = (n - 2 * s) / 2
    assert al[0] == 0
    for j in range(1, k):
        assert al[j] == pytest.approx((g * al[j - 1] + 1) / (g - 2 * s), rel=1e-10)


@settings(max_examples=60, deadline=None)
@given(tower_dims, st.floats(0.5, 200.0))
def test_beta_recursion(dims, c):
    n, s, k = dims
    P = _params(n, s, k)
    al, be = alpha_exponents(P), beta_coefficients(P, c)
    g = (n - 2 * s) / 2
    assert be[0] == 1.0
    for j in range(1, k):
        assert be[j] == pytest.approx((al[j] * be[j - 1] ** g / c) ** (1 / (g - 2 * s)), rel=1e-9)


def test_known_rates():
    P = make_params(7, 0.9, 3, 10.0)
    assert np.allclose(alpha_exponents(P), [0.0, 1.25, 5.3125])
    P = make_params(4, 0.5, 3, 10.0)
    assert np.allclose(alpha_exponents(P), [0.0, 2.0, 8.0])
    assert np.allclose(beta_coefficients(P, 16.0), [1.0, 1 / 64, (8 * 64 ** -1.5 / 16) ** 2])


@settings(max_examples=40, deadline=None)
@given(tower_dims, st.floats(2.0, 8.0), st.sampled_from(["forward", "ancient"]))
def test_explicit_trajectory_solves_reduced_ode(dims, logt, direction):
    n, s, k = dims
    P = _params(n, s, k, direction)
    c = 10.0
    t = 10 ** logt * (1 if direction == "forward" else -1)
    sc = mu0_trajectory(P, c, t)
    d = mu0_derivative(P, c, t)
    assume(np.all(sc.mu0 > 1e-250))
    rhs = reduced_ode_rhs(P, c, sc.mu0)
    assert d[0] == 0
    # mu' = rhs with rhs already divided by mu^(2s-1)
    assert np.allclose(d[1:], rhs[1:], rtol=1e-9, atol=0)


def test_trajectory_sign_conventions():
    P = make_params(4, 0.5, 2, 10.0)
    assert mu0_derivative(P, 16.0, 100.0)[1] < 0
    Pa = make_params(4, 0.5, 2, 10.0, "ancient")
    assert mu0_derivative(Pa, 16.0, -100.0)[1] > 0
    with pytest.raises(ValidationError):
        mu0_trajectory(P, 16.0, -5.0)
    with pytest.raises(ValidationError):
        mu0_trajectory(Pa, 16.0, 5.0)


@pytest.mark.parametrize("direction", ["forward", "ancient"])
def test_integration_follows_explicit_law(direction):
    P = make_params(7, 0.9, 3, 10.0, direction)
    c = C_FROZEN[(7, 0.9)]
    sign = 1 if direction == "forward" else -1
    init = mu0_trajectory(P, c, sign * 1e3)
    ts = sign * np.geomspace(1e3, 1e5, 12)
    path = integrate_reduced_ode(P, c, init, sign * 1e3, sign * 1e5, times=ts)
    exact = np.array([mu0_trajectory(P, c, t).mu0 for t in ts])
    assert np.max(np.abs(path.mu() / exact - 1)) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.05, 0.95), min_size=2, max_size=3), st.sampled_from(["forward", "ancient"]))
def test_integration_preserves_ordering(ratios, direction):
    P = make_params(4, 0.5, len(ratios) + 1, 10.0, direction)
    sign = 1 if direction == "forward" else -1
    mu = np.cumprod([1.0] + ratios)
    path = integrate_reduced_ode(P, 16.0, make_scales(sign * 10.0, mu), sign * 10.0, sign * 1e3, n_out=20)
    m = path.mu()
    assert np.all(np.diff(m, axis=1) < 0)
    assert np.all(np.diff(m[:, 1:], axis=0) <= 0)


def test_integration_rejects_bad_input():
    P = make_params(4, 0.5, 2, 10.0)
    with pytest.raises(ValidationError):
        integrate_reduced_ode(P, 16.0, make_scales(10.0, [1.0, 2.0]), 10.0, 100.0)
    with pytest.raises(ValidationError):
        integrate_reduced_ode(P, 16.0, make_scales(10.0, [1.0, 0.1]), 100.0, 10.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(0.01, 100))
def test_power_law_fit_recovers(e, a):
    t = np.geomspace(10, 1e4, 20)
    ex, pre, r2 = fit_power_law(t, a * t ** -e)
    assert ex == pytest.approx(e, abs=1e-9)
    assert pre == pytest.approx(a, rel=1e-8)
    assert r2 == pytest.approx(1.0)


def test_power_law_fit_degenerate():
    t = np.geomspace(1, 10, 20)
    y = np.exp(np.sin(12 * np.log(t)))
    with pytest.raises(DegenerateFit):
        fit_power_law(t, y)
    with pytest.raises(ValidationError):
        fit_power_law(t[:3], t[:3])


def test_linearized_system_first_component():
    # M_1 = t^-2 gives mu_11 = int_t^inf M_1 = 1/t
    P = make_params(4, 0.5, 2, 10.0)
    M = [lambda t: t ** -2.0, lambda t: 0 * t]
    path = solve_linearized_params(M, P, 16.0, 10.0, 1e3)
    mu1 = path.mu1()[:, 0]
    assert np.max(np.abs(mu1 * path.times - 1)) < 1e-5
    assert path.meta["ode_residual"] < 1e-3
    assert np.allclose(path.derivatives[:, 0], -path.times ** -2.0)


def test_linearized_system_second_component():
    # mu_12' + kap alpha/t mu_12 = M_2 with M_2 = t^-q has the particular solution
    # t^(1-q) / (1 - q + kap alpha) and the homogeneous part fixed by mu_12(t0) = 0
    P = make_params(4, 0.5, 2, 10.0)
    al = alpha_exponents(P)[1]
    kap = (P.n - 6 * P.s + 2) / 2
    q = 1 + al + 0.5
    M = [lambda t: 0 * t, lambda t: t ** -q]
    t0 = 10.0
    path = solve_linearized_params(M, P, 16.0, t0, 1e3)
    m = 1 - q + kap * al
    exact = (path.times ** (1 - q) - t0 ** m * path.times ** (-kap * al)) / m
    got = path.mu1()[:, 1]
    assert np.max(np.abs(got - exact)) < 1e-6 * np.max(np.abs(exact))


def test_linearized_system_rejects_slow_decay():
    P = make_params(4, 0.5, 2, 10.0)
    with pytest.raises(DecayViolated):
        solve_linearized_params([lambda t: t ** -0.5, lambda t: 0 * t], P, 16.0, 10.0, 1e3)
