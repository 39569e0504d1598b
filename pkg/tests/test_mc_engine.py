import dataclasses
import math
import warnings

import numpy as np
import pytest
from scipy import special, stats

from supdens.brownian_reference import drifted_joint_cdf
from supdens.kernels import Profile
from supdens.mc_engine import (
    BLOCK_SIZE,
    CoverageWarning,
    SimulationError,
    bridge_max_sample,
    cell_histogram,
    estimate_density,
    estimate_density_series,
    feynman_kac,
    load_batch,
    save_batch,
    simulate,
    simulate_series,
)
from supdens.model_core import TriangularGrid, build_model

ZERO = build_model({"kind": "zero"}, {"kind": "point"})
TANH = build_model("tanh(x1)", {"kind": "point"})


def test_bridge_max_reference_draw():
    np.testing.assert_allclose(bridge_max_sample(0.0, 0.0, 1.0, math.exp(-2.0)), 1.0, rtol=1e-15)


def test_bridge_max_matches_analytic_law():
    rng = np.random.default_rng(11)
    n = 20_000
    a, b, dt = 0.2, -0.4, 0.5
    y = bridge_max_sample(a, b, dt, rng.random(n))
    assert np.all(y >= max(a, b))
    cdf = lambda v: np.where(v >= max(a, b), 1.0 - np.exp(-2.0 * (v - a) * (v - b) / dt), 0.0)
    ks = stats.kstest(y, cdf).statistic
    assert ks <= 1.63 / math.sqrt(n)


def test_path_invariants():
    b = simulate(TANH, 1.0, 50, 5000, seed=2)
    assert np.all(b.sup >= b.terminal[:, 0])
    assert np.all(b.sup >= 0.0)
    const = build_model({"kind": "constant", "mu": 0.7}, {"kind": "point"})
    w = simulate(const, 1.0, 10, 2000, seed=2, fk_weights=True).weights
    np.testing.assert_array_equal(w, 1.0)
    w = simulate(TANH, 1.0, 10, 2000, seed=2, fk_weights=True).weights
    assert np.all(w > 0)


def test_same_seed_same_batch_at_any_thread_count():
    n = 2 * BLOCK_SIZE + 123
    a = simulate(TANH, 0.5, 16, n, seed=77, threads=1, fk_weights=True)
    b = simulate(TANH, 0.5, 16, n, seed=77, threads=4, fk_weights=True)
    np.testing.assert_array_equal(a.terminal, b.terminal)
    np.testing.assert_array_equal(a.sup, b.sup)
    np.testing.assert_array_equal(a.weights, b.weights)
    c = simulate(TANH, 0.5, 16, n, seed=78)
    assert not np.array_equal(a.sup, c.sup)


def test_mean_supremum_of_brownian_motion():
    b = simulate(ZERO, 1.0, 100, 200_000, seed=5)
    se = b.sup.std(ddof=1) / math.sqrt(b.n_paths)
    assert abs(b.sup.mean() - math.sqrt(2 / math.pi)) <= 3 * se


def test_discrete_monitoring_bias_without_bridge():
    target = 2 * special.ndtr(1.0) - 1
    bias = []
    for n_steps in (10, 100):
        b = simulate(ZERO, 1.0, n_steps, 100_000, bridge_correction=False, seed=9)
        bias.append(np.mean(b.sup <= 1.0) - target)
    assert bias[0] > bias[1] > 0
    # the bias scales like sqrt(dt)
    assert 1.5 < bias[0] / bias[1] < 6.0
    b = simulate(ZERO, 1.0, 10, 100_000, bridge_correction=True, seed=9)
    p = np.mean(b.sup <= 1.0)
    assert abs(p - target) <= 3 * math.sqrt(target * (1 - target) / b.n_paths)


def test_histogram_against_exact_cell_masses():
    b = simulate(ZERO, 1.0, 20, 200_000, seed=4)
    m_edges = np.linspace(0, 3, 33)
    x_edges = np.linspace(-3, 3, 33)
    mass, se, escaped = cell_histogram(b, m_edges, x_edges)
    # exact cell masses from the joint distribution function
    F = drifted_joint_cdf(m_edges[:, None], x_edges[None, :], 1.0, 0.0)
    exact = F[1:, 1:] - F[:-1, 1:] - F[1:, :-1] + F[:-1, :-1]
    # the expected L1 sampling noise at 2e5 paths is 0.030
    noise = math.sqrt(2 / math.pi) * np.sum(np.sqrt(exact * (1 - exact) / b.n_paths))
    assert np.sum(np.abs(mass - exact)) < noise + 0.01
    assert 0 <= escaped < 0.02
    assert mass[-1, 0] == 0.0


def test_cell_standard_error_halves_with_four_times_the_paths():
    b = simulate(ZERO, 1.0, 8, 160_000, seed=21)
    m_edges = np.linspace(0, 3, 13)
    x_edges = np.linspace(-3, 3, 13)

    def spread(n_sub):
        size = b.n_paths // n_sub
        masses = []
        for s in range(n_sub):
            sub = dataclasses.replace(b, terminal=b.terminal[s * size:(s + 1) * size],
                                      sup=b.sup[s * size:(s + 1) * size])
            masses.append(cell_histogram(sub, m_edges, x_edges)[0])
        return np.std(masses, axis=0, ddof=1)

    s1, s2 = spread(32), spread(16)
    keep = s1 > 0
    ratio = np.mean(s1[keep]) / np.mean(s2[keep])
    assert abs(ratio - math.sqrt(2)) <= 0.1 * math.sqrt(2)


def test_estimate_density_mass_and_coverage_warning():
    b = simulate(ZERO, 1.0, 20, 50_000, seed=1)
    g = TriangularGrid.uniform(-5.0, 5.0, 40, 1.0, 4, m_lo=0.0)
    for method in ("histogram", "kernel"):
        est = estimate_density(b, g, method)
        assert est.provenance == "monte_carlo"
        np.testing.assert_allclose(est.mass(3), 1.0, atol=2e-3)
        assert np.all(est.values[:3] == 0)
    small = TriangularGrid.uniform(-1.0, 1.0, 8, 1.0, 1, m_lo=0.0)
    with pytest.warns(CoverageWarning):
        estimate_density(b, small)


def test_estimate_density_two_dimensional():
    model = build_model({"kind": "constant", "mu": [0.0, 0.5]}, {"kind": "point"}, d=2)
    b = simulate(model, 1.0, 10, 50_000, seed=3)
    g = TriangularGrid.uniform(-5.0, 5.0, 20, 1.0, 2, m_lo=0.0, xt_cells=20, xt_box=(-5.0, 5.0))
    est = estimate_density(b, g)
    np.testing.assert_allclose(est.mass(1), 1.0, atol=5e-3)


def test_series_agrees_with_single_horizon():
    g = TriangularGrid.uniform(-5.0, 5.0, 40, 1.0, 4, m_lo=0.0)
    s = simulate_series(ZERO, g.times, 5, 30_000, seed=6)
    est = estimate_density_series(s, g)
    np.testing.assert_allclose(est.mass(), 1.0, atol=3e-3)
    np.testing.assert_array_equal(s.sup[-1] >= s.x1[-1], True)
    assert np.all(np.diff(s.sup, axis=0) >= 0)


def test_exclusion_of_non_finite_paths():
    bad = dataclasses.replace(ZERO, drift_fn=lambda x: np.where(x > 1.5, np.nan, 0.0))
    with pytest.raises(SimulationError):
        simulate(bad, 1.0, 20, 5000, seed=0)
    rare = dataclasses.replace(ZERO, drift_fn=lambda x: np.where(x > 3.9, np.nan, 0.0))
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        b = simulate(rare, 1.0, 20, 50_000, seed=0)
    assert 0 < b.n_excluded <= 50
    assert b.n_paths == 50_000 - b.n_excluded
    assert any("excluded" in str(r.message) for r in rec)


def test_batch_round_trip(tmp_path):
    b = simulate(TANH, 1.0, 10, 3000, seed=4, fk_weights=True)
    save_batch(b, tmp_path / "paths.bin")
    c = load_batch(tmp_path / "paths.bin")
    np.testing.assert_array_equal(b.terminal, c.terminal)
    np.testing.assert_array_equal(b.sup, c.sup)
    np.testing.assert_array_equal(b.weights, c.weights)
    assert (c.seed, c.n_steps, c.T) == (4, 10, 1.0)


def test_feynman_kac_unit_payout():
    v = feynman_kac(ZERO, lambda y: np.ones(len(y)), 0.3, 1.0, 1000, n_steps=5)
    assert v == 1.0


def test_feynman_kac_linear_payout_constant_drift():
    mu, x, t = 0.8, 0.25, 1.5
    model = build_model({"kind": "constant", "mu": mu}, {"kind": "point"})
    v, se = feynman_kac(model, lambda y: y[:, 0], x, t, 100_000, seed=3, n_steps=10, return_stderr=True)
    assert abs(v - (x - mu * t)) <= 3 * se


def test_feynman_kac_short_time_expansion():
    x, t = 0.3, 0.01
    v = feynman_kac(TANH, lambda y: np.ones(len(y)), x, t, 20_000, seed=2, n_steps=20)
    assert abs(v - (1 - t / np.cosh(x) ** 2)) < 5 * t * t


def test_feynman_kac_semigroup_property():
    model = build_model({"kind": "constant", "mu": 0.5}, {"kind": "point"})
    f = Profile(0.0, 1.5)
    fy = lambda y: f(y[:, 0])
    s, t, x = 0.3, 0.4, 0.2
    nodes = np.linspace(-4, 4, 81)
    inner = np.array([feynman_kac(model, fy, y, s, 40_000, seed=1, n_steps=2) for y in nodes])
    g = lambda y: np.interp(y[:, 0], nodes, inner)
    two, se2 = feynman_kac(model, g, x, t, 200_000, seed=2, n_steps=2, return_stderr=True)
    one, se1 = feynman_kac(model, fy, x, s + t, 200_000, seed=3, n_steps=2, return_stderr=True)
    # the inner estimates share their normals, so the noise they add is one
    # common shift of size about se2
    assert abs(two - one) <= 3 * math.sqrt(se1 ** 2 + 2 * se2 ** 2)


def test_feynman_kac_l2_envelope():
    T = 0.5
    f = Profile(0.5, 1.0)
    fy = lambda y: f(y[:, 0])
    C = math.exp(TANH.divergence_bound * T)
    env = C * math.exp(0.5 * TANH.drift_bound ** 2 * T)
    z, w = np.polynomial.hermite_e.hermegauss(80)
    w = w / w.sum()
    for x in (-1.0, 0.0, 0.5, 1.5):
        v, se = feynman_kac(TANH, fy, x, T, 50_000, seed=4, n_steps=20, return_stderr=True)
        l2 = math.sqrt(np.sum(w * f(x + math.sqrt(T) * z) ** 2))
        assert abs(v) - 3 * se <= env * l2
