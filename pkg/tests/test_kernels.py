import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from supdens.kernels import (
    GaussianKernelParams,
    KernelEstimateParams,
    Profile,
    bump_constant,
    contraction_bound,
    contraction_bound_direct,
    first_n_below,
    g_alpha,
    g_alpha_power,
    g_alpha_power_numeric,
    g_alpha_recursion_numeric,
    gaussian_convolve_check,
    log_contraction_bound,
    mollifier,
    phi,
    phi1,
)


def test_phi_point_values():
    np.testing.assert_allclose(phi(0.0, 1.0), 1 / math.sqrt(2 * math.pi), rtol=1e-15)
    np.testing.assert_allclose(phi(np.zeros(2), 1.0), 1 / (2 * math.pi), rtol=1e-15)


def test_phi_unit_mass():
    val, _ = integrate.quad(lambda u: phi1(u, 2.0), -np.inf, np.inf, epsabs=1e-13)
    assert abs(val - 1.0) < 1e-9


def test_phi_factorises_over_coordinates():
    u = np.array([[0.3, -1.2, 0.7], [1.0, 0.0, -2.0]])
    np.testing.assert_allclose(phi(u, 0.7), np.prod(phi1(u, 0.7), axis=-1), rtol=1e-14)


def test_phi_rejects_nonpositive_variance():
    with pytest.raises(ValueError):
        phi(0.0, 0.0)
    with pytest.raises(ValueError):
        GaussianKernelParams(k=1, t=-1.0)
    with pytest.raises(ValueError):
        GaussianKernelParams(k=0, t=1.0)


def test_convolution_at_origin():
    analytic, quad = gaussian_convolve_check(0.0, 0.0, 1.0, 1.0, k=1)
    np.testing.assert_allclose(analytic, 1 / math.sqrt(4 * math.pi), rtol=1e-14)
    assert abs(analytic - quad) < 1e-8


def test_convolution_two_dimensional_case():
    analytic, quad = gaussian_convolve_check(np.zeros(2), np.array([1.0, 0.0]), 1.0, 3.0, k=2)
    np.testing.assert_allclose(analytic, phi(np.array([1.0, 0.0]), 4.0), rtol=1e-14)
    assert abs(analytic - quad) < 1e-8


def test_convolution_tail_decay():
    vals = [gaussian_convolve_check(0.0, b, 1.0, 1.0)[1] for b in (5.0, 10.0, 20.0)]
    assert vals[0] > vals[1] > vals[2]
    assert vals[2] < 1e-40


@settings(max_examples=40, deadline=None)
@given(
    k=st.integers(1, 3),
    s=st.floats(0.1, 5.0),
    r=st.floats(0.1, 5.0),
    a=st.lists(st.floats(-2.5, 2.5), min_size=3, max_size=3),
    b=st.lists(st.floats(-2.5, 2.5), min_size=3, max_size=3),
)
def test_convolution_identity_property(k, s, r, a, b):
    analytic, quad = gaussian_convolve_check(np.array(a[:k]), np.array(b[:k]), s, r, k=k)
    assert abs(analytic - quad) <= 1e-7


def test_g_alpha_power_first_and_known_values():
    t = np.array([0.2, 1.0, 3.0])
    np.testing.assert_allclose(g_alpha_power(1, 0.5, t), g_alpha(t, 0.5), rtol=1e-14)
    np.testing.assert_allclose(g_alpha_power(2, 1.0, 1.0), math.pi, rtol=1e-14)
    np.testing.assert_allclose(g_alpha_power(4, 1.0, 1.0), math.pi ** 2, rtol=1e-14)


@pytest.mark.parametrize("alpha", [0.3, 0.5, 0.8])
@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_g_alpha_power_matches_numerical_convolution(alpha, n):
    t = np.array([0.5, 1.0, 2.0])
    np.testing.assert_allclose(g_alpha_power_numeric(n, alpha, t), g_alpha_power(n, alpha, t), rtol=1e-4)


@pytest.mark.parametrize("alpha", [0.3, 0.5, 0.8])
@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_g_alpha_power_recursion(alpha, n):
    t = np.array([0.25, 1.0, 4.0])
    np.testing.assert_allclose(g_alpha_recursion_numeric(n, alpha, t), g_alpha_power(n + 1, alpha, t), rtol=1e-4)


def test_g_alpha_power_domain_errors():
    with pytest.raises(ValueError):
        g_alpha_power(0, 0.5, 1.0)
    with pytest.raises(ValueError):
        g_alpha_power(2, 0.5, 0.0)
    with pytest.raises(ValueError):
        g_alpha_power(2, 2.5, 1.0)


def test_contraction_bound_reference_values():
    # alpha = 1, C_T = 2, M = 1/2, T = 1 gives pi^(n/2) / Gamma(n/2)
    ref = lambda n: math.pi ** (n / 2) / math.gamma(n / 2)
    for n in (1, 5, 20, 40):
        np.testing.assert_allclose(contraction_bound(n, 1.0, 2.0, 0.5, 1.0), ref(n), rtol=1e-10)
    np.testing.assert_allclose(contraction_bound(20, 1.0, 2.0, 0.5, 1.0), 0.258, rtol=5e-3)
    # pi^20 / 19! exactly
    np.testing.assert_allclose(contraction_bound(40, 1.0, 2.0, 0.5, 1.0), math.pi ** 20 / math.factorial(19),
                               rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(alpha=st.floats(0.05, 0.95), C=st.floats(0.1, 10.0), M=st.floats(0.1, 10.0),
       T=st.floats(0.1, 5.0), d=st.integers(1, 3))
def test_contraction_bound_properties(alpha, C, M, T, d):
    n = np.arange(1, 501)
    lb = log_contraction_bound(n, alpha, C, M, T, d)
    assert np.all(np.isfinite(lb))
    # n = 1 cancels the Gamma factors
    np.testing.assert_allclose(lb[0], math.log(0.5 * C * (2 * M) ** (0.5 * d) * T ** (0.5 * alpha + 1)), rtol=1e-12,
                               atol=1e-12)
    # Gamma(n alpha / 2) wins eventually; for small alpha or large C_T only
    # at astronomically large n, which log space reaches directly
    big = log_contraction_bound(np.array([1e119, 1e120]), alpha, C, M, T, d)
    assert big[1] < big[0] and big[1] < -1e100
    direct = contraction_bound_direct(n[:40], alpha, C, M, T, d)
    ok = np.isfinite(direct) & (direct > 1e-300) & (direct < 1e300)
    np.testing.assert_allclose(np.log(direct[ok]), lb[:40][ok], rtol=1e-9, atol=1e-9)


def test_contraction_bound_tends_to_zero_in_log_space():
    lb = log_contraction_bound(np.arange(1, 501), 0.5, 1.0, 1.0, 1.0)
    assert lb[-1] < -100
    n = first_n_below(1e-12, 0.5, 1.0, 1.0, 1.0)
    assert n is not None and contraction_bound(n, 0.5, 1.0, 1.0, 1.0) < 1e-12


def test_contraction_bound_rejects_bad_arguments():
    with pytest.raises(ValueError):
        contraction_bound(0, 0.5, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        contraction_bound(3, 0.5, -1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        KernelEstimateParams(alpha=1.5)


def test_bump_constant_reference():
    np.testing.assert_allclose(bump_constant(), 2.2523, atol=1e-4)
    u = -1 + (np.arange(100_000) + 0.5) * (2 / 100_000)
    chi = bump_constant() * np.exp(-1 / (1 - u * u))
    assert abs(np.sum(chi) * 2 / 100_000 - 1) < 1e-6


def test_bump_profile_values():
    H = Profile(0.0, 1.0)
    np.testing.assert_allclose(H(0.0), bump_constant() * math.exp(-1), rtol=1e-14)
    assert H(1.0) == 0.0 and H(-1.0) == 0.0
    val, _ = integrate.quad(H, -1, 1, epsabs=1e-13)
    assert abs(val - 1) < 1e-9


@pytest.mark.parametrize("eps", [1.0, 0.1, 0.01])
def test_mollifier_unit_mass_and_support(eps):
    chi = mollifier(eps, center=0.4)
    val, _ = integrate.quad(chi, 0.4 - eps, 0.4 + eps, epsabs=1e-13, epsrel=1e-12, limit=200)
    assert abs(val - 1) < 1e-6
    assert chi(0.4 + eps) == 0.0 and chi(0.4 - eps) == 0.0
    assert np.all(chi(np.array([0.4 + 1.01 * eps, 0.4 - 2 * eps])) == 0.0)


def test_mollifier_second_order_consistency():
    x1 = 0.7
    errs = []
    for eps in (0.4, 0.2, 0.1, 0.05):
        chi = mollifier(eps, center=x1)
        val, _ = integrate.quad(lambda u: u * u * chi(u), x1 - eps, x1 + eps, epsabs=1e-14, epsrel=1e-13)
        errs.append(abs(val - x1 * x1))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    np.testing.assert_allclose(orders, 2.0, atol=0.05)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-2, 2), eps=st.floats(0.2, 3), deg=st.integers(0, 3), u=st.floats(-0.95, 0.95))
def test_profile_derivatives_match_finite_differences(c, eps, deg, u):
    P = Profile(c, eps, degree=deg)
    x = c + u * eps
    h = 1e-4 * eps
    fd1 = (P(x + h) - P(x - h)) / (2 * h)
    fd2 = (P(x + h) - 2 * P(x) + P(x - h)) / h ** 2
    scale1 = max(1.0, float(np.max(np.abs(P.d1(np.linspace(c - eps, c + eps, 201))))))
    scale2 = max(1.0, float(np.max(np.abs(P.d2(np.linspace(c - eps, c + eps, 201))))))
    assert abs(P.d1(x) - fd1) <= 1e-6 * scale1
    assert abs(P.d2(x) - fd2) <= 1e-4 * scale2


def test_gamma_function_identity_used_by_powers():
    # g^{*n}(1) = Gamma(alpha/2)^n / Gamma(n alpha/2)
    for n in range(1, 6):
        np.testing.assert_allclose(g_alpha_power(n, 0.5, 1.0),
                                   special.gamma(0.25) ** n / special.gamma(0.25 * n), rtol=1e-12)
