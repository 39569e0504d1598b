import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from supdens.brownian_reference import bm_joint_density, exact_density_grid, p0_seed
from supdens.kernels import contraction_bound
from supdens.mc_engine import estimate_density, simulate
from supdens.model_core import ConfigurationError, build_model, default_grid
from supdens.parametrix_solver import (
    DivergenceError,
    apply_alpha_term,
    apply_beta_term,
    beta_b_integral,
    bound_ratios,
    contraction_check,
    fit_ratio_constant,
    g_alpha_time_convolution,
    solve,
    solve_d2_smoke,
    solve_transition_chain,
)

MU = build_model({"kind": "constant", "mu": 0.5}, {"kind": "point"})
TANH = build_model("tanh(x1)", {"kind": "point"})


@pytest.fixture(autouse=True)
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


@pytest.fixture(scope="module")
def mu_solves():
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for n, K in ((32, 8), (64, 16)):
            g = default_grid(MU, 1.0, n, K)
            out[n] = (g,) + solve(MU, g)
    return out


def test_zero_drift_returns_the_seed():
    model = build_model({"kind": "zero"}, {"kind": "point"})
    g = default_grid(model, 1.0, 32, 8)
    dens, rep = solve(model, g)
    assert dens.provenance == "exact" and rep["converged"]
    np.testing.assert_array_equal(dens.values, p0_seed(model, g).values)


def test_constant_drift_converges_to_closed_form(mu_solves):
    errs = []
    for n in (32, 64):
        g, dens, rep = mu_solves[n]
        assert rep["converged"]
        exact = exact_density_grid(MU, g)
        errs.append(dens.l1_distance(exact))
        np.testing.assert_allclose(rep["mass"][-1], 1.0, atol=0.02)
    assert errs[1] < errs[0]
    assert errs[1] < 0.03


def test_increments_decay_within_fitted_bound(mu_solves):
    _, _, rep = mu_solves[64]
    chk = contraction_check(rep)
    assert chk["geometric"] and chk["within_bound"] and chk["n_checked"] >= 3
    b = np.asarray(rep["bound_sequence"])
    np.testing.assert_allclose(b[1:] / b[:-1], rep["bound_ratios"], rtol=1e-10)


def test_fixed_point_residual_of_exact_density_shrinks():
    res = []
    for n, K in ((32, 8), (64, 16)):
        g = default_grid(MU, 1.0, n, K)
        exact = exact_density_grid(MU, g)
        seed = p0_seed(MU, g)
        corr = -(apply_alpha_term(exact, MU, g) + apply_beta_term(exact, MU, g))
        r = exact.values - seed.values - corr
        res.append(float(g.dt * np.sum(np.abs(r[-1]) * g.triangle_weights())))
    assert res[1] < 0.5 * res[0]


def test_term_splits_are_consistent():
    g = default_grid(TANH, 1.0, 16, 4)
    seed = p0_seed(TANH, g)
    a_all = apply_alpha_term(seed, TANH, g)
    np.testing.assert_allclose(apply_alpha_term(seed, TANH, g, k="m") + apply_alpha_term(seed, TANH, g, k="x1"),
                               a_all, atol=1e-14)
    vals = seed.values + 0.1
    b_all = apply_beta_term(vals, TANH, g)
    b_m = apply_beta_term(vals, TANH, g, k="m")
    np.testing.assert_allclose(b_m + apply_beta_term(vals, TANH, g, k="x1"), b_all, atol=1e-12)
    with pytest.raises(ValueError):
        apply_alpha_term(seed, TANH, g, k="x2")


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-1.0, 0.5), x=st.floats(-1.0, 0.5), dm=st.floats(0.1, 1.5), tau=st.floats(0.1, 1.0))
def test_beta_b_integral_closed_form(a, x, dm, tau):
    m = max(a, x) + dm
    # the integrand peaks at the lower limit when a = x; the quadrature skips
    # [lo, lo + 2h], so h must be small against tau^1.5
    h = 1e-7
    dx = lambda b: (bm_joint_density(b, x + h, tau, a) - bm_joint_density(b, x - h, tau, a)) / (2 * h)
    ref, _ = integrate.quad(dx, max(a, x) + 2 * h, m, epsabs=1e-10)
    assert abs(beta_b_integral(m, a, x, tau, "x1") - ref) < 1e-4 * (1 + abs(ref)) / tau
    dmf = lambda b: (bm_joint_density(b + h, x, tau, a) - bm_joint_density(b - h, x, tau, a)) / (2 * h)
    ref_m, _ = integrate.quad(dmf, max(a, x) + 2 * h, m, epsabs=1e-10)
    assert abs(beta_b_integral(m, a, x, tau, "m") - ref_m) < 1e-4 * (1 + abs(ref_m)) / tau


def test_g_alpha_time_convolution_exact_for_linear_data():
    times = np.linspace(0.1, 1.0, 10)
    alpha = 0.5
    beta = alpha / 2 - 1
    out = g_alpha_time_convolution(times, times, alpha)
    ref = times ** (beta + 2) / ((beta + 1) * (beta + 2))
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_bound_ratio_helpers():
    r = bound_ratios(10, 0.5, 1.3, 1.0)
    b = contraction_bound(np.arange(1, 12), 0.5, 1.3, 1.0, 1.0)
    np.testing.assert_allclose(r, b[1:] / b[:-1], rtol=1e-12)
    C = fit_ratio_constant(0.4, 0.5, 1.0)
    np.testing.assert_allclose(bound_ratios(1, 0.5, C, 1.0)[0], 0.4, rtol=1e-12)


def test_divergence_is_detected_and_reported():
    strong = build_model({"kind": "tanh", "scale": 4.0}, {"kind": "point"})
    g = default_grid(strong, 1.0, 32, 8)
    with pytest.raises(DivergenceError) as err:
        solve(strong, g, max_iter=30)
    inc = err.value.report["increments_l1"]
    assert len(inc) == 4 and all(b >= a for a, b in zip(inc[:-1], inc[1:]))
    dens, rep = solve(strong, g, max_iter=30, raise_on_divergence=False)
    assert rep["diverged"] and not rep["converged"]


def test_solve_rejects_two_dimensions():
    model = build_model({"kind": "constant", "mu": [0.5, 0.0]}, {"kind": "point"}, d=2)
    with pytest.raises(ConfigurationError):
        solve(model, default_grid(model, 1.0, 16, 4, tail=1e-4))


def test_transition_chain_constant_drift():
    g = default_grid(MU, 1.0, 64, 16, tail=1e-4)
    dens, rep = solve_transition_chain(MU, g)
    assert dens.l1_distance(exact_density_grid(MU, g)) < 0.02
    np.testing.assert_allclose(rep["mass"][-1], 1.0, atol=0.01)


def test_transition_chain_agrees_with_volterra_for_tanh():
    g = default_grid(TANH, 1.0, 128, 32, tail=1e-4)
    chain, _ = solve_transition_chain(TANH, g)
    volt, _ = solve(TANH, g)
    assert chain.l1_distance(volt) < 0.05


def test_d2_smoke_constant_drift_against_closed_form():
    model = build_model({"kind": "constant", "mu": [0.5, -0.3]}, {"kind": "point"}, d=2)
    g = default_grid(model, 1.0, 48, 8, tail=1e-4)
    dens, rep = solve_d2_smoke(model, g)
    assert dens.l1_distance(exact_density_grid(model, g)) < 0.1
    # 48 cells and 8 slices lose about 2% of mass to the coarse chain
    np.testing.assert_allclose(rep["mass"][-1], 1.0, atol=0.03)


def test_d2_smoke_marginal_matches_one_dimensional_chain():
    model = build_model({"kind": "expression", "expr": ["tanh(x1)", "0.3"]}, {"kind": "point"}, d=2)
    g = default_grid(model, 1.0, 24, 4, tail=1e-4)
    dens, _ = solve_d2_smoke(model, g)
    marg = np.tensordot(dens.values, g.xt_weights()[0], axes=([-1], [0]))
    g1 = type(g)(x_nodes=g.x_nodes, m_offset=g.m_offset, times=g.times, T=g.T)
    one, _ = solve_transition_chain(TANH, g1, n_sub=4)
    # the x~ factor is a Gaussian carried exactly, up to box truncation
    assert np.max(np.abs(marg - one.values)) < 1e-3 * np.max(np.abs(one.values))


def test_d2_smoke_coupled_drift_against_monte_carlo():
    model = build_model({"kind": "expression", "expr": ["tanh(x2)", "-0.5*tanh(x1)"]}, {"kind": "point"}, d=2)
    g = default_grid(model, 1.0, 48, 8, tail=1e-4)
    dens, _ = solve_d2_smoke(model, g)
    batch = simulate(model, 1.0, 400, 400_000, seed=12)
    mc = estimate_density(batch, g)
    assert dens.l1_distance(mc) < 0.15


def test_d2_smoke_limits():
    model = build_model({"kind": "constant", "mu": [0.5, 0.0]}, {"kind": "point"}, d=2)
    with pytest.raises(ConfigurationError):
        solve_d2_smoke(model, default_grid(model, 1.0, 64, 8, tail=1e-4))
    with pytest.raises(ConfigurationError):
        solve_d2_smoke(MU, default_grid(MU, 1.0, 16, 4))
