import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from supdens.dual_semigroup import (
    KernelEval,
    KernelModeError,
    LowStatisticsError,
    ball_refinement_study,
    chapman_kolmogorov_check,
    d_gamma_dx1,
    gamma0,
    gamma_envelope_check,
    gamma_exact,
    gamma_mc,
    semigroup_apply,
    write_kernel_csv,
)
from supdens.kernels import KernelEstimateParams, Profile, phi1
from supdens.model_core import build_model

ZERO = build_model({"kind": "zero"}, {"kind": "point"})
MU1 = build_model({"kind": "constant", "mu": 1.0}, {"kind": "point"})
TANH = build_model("tanh(x1)", {"kind": "point"})


def test_gamma0_values_and_symmetry():
    np.testing.assert_allclose(gamma0(0.3, 0.3, 0.5), 1 / math.sqrt(2 * math.pi * 0.5), rtol=1e-15)
    np.testing.assert_allclose(gamma0(np.zeros(2), np.zeros(2), 0.5), 1 / (2 * math.pi * 0.5), rtol=1e-15)
    np.testing.assert_allclose(gamma0(0.3, -1.1, 0.7), gamma0(-1.1, 0.3, 0.7), rtol=1e-15)
    with pytest.raises(ValueError):
        gamma0(0.0, 0.0, 0.0)


def test_gamma0_chapman_kolmogorov():
    val, ref = chapman_kolmogorov_check(0.4, -0.9, 0.3, 0.8, ZERO)
    assert abs(val - ref) < 1e-7


@settings(max_examples=25, deadline=None)
@given(mu=st.floats(-2, 2), x=st.floats(-2, 2), y=st.floats(-2, 2), s=st.floats(0.05, 2), r=st.floats(0.05, 2))
def test_constant_drift_chapman_kolmogorov(mu, x, y, s, r):
    model = build_model({"kind": "constant", "mu": mu}, {"kind": "point"}) if mu != 0 else ZERO
    val, ref = chapman_kolmogorov_check(x, y, s, r, model)
    assert abs(val - ref) < 1e-6


def test_gamma_exact_values():
    g, g1 = gamma_exact(0.0, 0.0, 1.0, MU1)
    np.testing.assert_allclose(g, 0.241971, atol=1e-6)
    np.testing.assert_allclose(g1, -0.156971, atol=1e-6)
    g, g1 = gamma_exact(0.2, np.linspace(-3, 3, 13), 0.7, ZERO)
    np.testing.assert_array_equal(g1, 0.0)
    mass, _ = integrate.quad(lambda y: float(gamma_exact(0.3, y, 0.8, MU1)[0]), -15, 15, epsabs=1e-13)
    assert abs(mass - 1) < 1e-10
    with pytest.raises(KernelModeError):
        gamma_exact(0.0, 0.0, 1.0, TANH)


def test_kernel_eval_modes():
    assert KernelEval(ZERO).mode == "exact_zero_drift"
    assert KernelEval(MU1).mode == "exact_constant_drift"
    assert KernelEval(TANH).mode == "mc_estimate"
    with pytest.raises(KernelModeError):
        KernelEval(MU1, mode="exact_zero_drift")
    with pytest.raises(KernelModeError):
        KernelEval(TANH, mode="exact_constant_drift")
    with pytest.raises(KernelModeError):
        KernelEval(TANH).gamma(0.0, 0.0, 1.0)


@pytest.mark.parametrize("model", [ZERO, MU1], ids=["zero", "constant"])
def test_gamma_mc_matches_exact_cell_average(model):
    lo, hi, x, t = -0.8, -0.4, 0.1, 0.6
    est = gamma_mc(x, (lo, hi), t, model, 200_000, seed=3, n_steps=4)
    ref, _ = integrate.quad(lambda y: float(gamma_exact(x, y, t, model)[0]), lo, hi)
    ref /= hi - lo
    assert abs(est.value - ref) <= 3 * est.stderr
    assert not est.low_statistics


def test_gamma_mc_zero_hits_flagged():
    est = gamma_mc(0.0, (30.0, 31.0), 0.1, ZERO, 1000, n_steps=2)
    assert est.value == 0.0 and est.hits == 0 and est.low_statistics


def test_gamma_mc_general_drift_is_positive_and_normalised():
    edges = np.linspace(-6, 6, 25)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        total += gamma_mc(0.2, (a, b), 0.5, TANH, 20_000, seed=1, n_steps=20).value * (b - a)
    # the weights exp(-int div B) make Q_t 1 smaller than one
    one = np.mean([gamma_mc(0.2, (-30, 30), 0.5, TANH, 20_000, seed=1, n_steps=20).value * 60])
    np.testing.assert_allclose(total, one, rtol=1e-3)
    assert 0.5 < one < 1.0


def test_envelope_fit():
    y = np.linspace(-3, 3, 61)
    ts = np.linspace(0.05, 1.0, 20)
    zero = gamma_envelope_check(0.0, y, ts, ZERO, KernelEstimateParams(alpha=0.5, c=4.0))
    assert zero["C"] == 0.0 and zero["violations"] == 0
    fits = []
    for n in (61, 121, 241):
        r = gamma_envelope_check(0.0, np.linspace(-3, 3, n), np.linspace(0.05, 1.0, n // 3), MU1,
                                 KernelEstimateParams(alpha=0.5, c=4.0))
        assert r["violations"] == 0 and np.isfinite(r["C"])
        fits.append(r["C"])
    assert abs(fits[-1] / fits[-2] - 1) <= 0.1
    d = gamma_envelope_check(0.0, y, ts, MU1, KernelEstimateParams(alpha=0.5, c=4.0), derivative=True)
    assert np.isfinite(d["C"]) and d["C"] > 0 and d["violations"] == 0


@settings(max_examples=30, deadline=None)
@given(mu=st.floats(-1.5, 1.5), x=st.floats(-2, 2), y=st.floats(-2, 2), t=st.floats(0.1, 2))
def test_d_gamma_dx1_matches_finite_difference(mu, x, y, t):
    model = build_model({"kind": "constant", "mu": mu}, {"kind": "point"}) if mu != 0 else ZERO
    h = 1e-3
    fd = (gamma_exact(x + h, y, t, model)[0] - gamma_exact(x - h, y, t, model)[0]) / (2 * h)
    an = d_gamma_dx1(x, y, t, model)
    scale = 1 / t ** 1.5
    assert abs(an - fd) <= 10 * h * h * scale
    np.testing.assert_allclose(an, (y - x + mu * t) / t * phi1(y - x + mu * t, t), rtol=1e-13, atol=1e-300)


def test_d_gamma0_vanishes_on_diagonal():
    assert d_gamma_dx1(0.7, 0.7, 0.4, ZERO) == 0.0


def test_d_gamma_mc_fallback_and_low_statistics():
    val, info = d_gamma_dx1(0.0, 0.3, 0.5, TANH, n_paths=100_000, seed=2)
    assert info["first_order"] and np.isfinite(val) and info["stderr"] > 0
    with pytest.raises(LowStatisticsError):
        d_gamma_dx1(0.0, 8.0, 0.5, TANH, n_paths=2000)


def test_strong_continuity_proxy():
    f = Profile(0.3, 1.0)
    xs = np.linspace(-2, 2, 81)
    errs = [np.max(np.abs(semigroup_apply(MU1, f, xs, t) - f(xs))) for t in (0.1, 0.01, 0.001)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.05


def test_ball_weak_residual_second_order():
    u0 = Profile(0.0, 1.5)
    src = lambda s, x: (1 + s) * Profile(0.5, 1.0)(x)
    study = ball_refinement_study(build_model({"kind": "constant", "mu": 0.7}, {"kind": "point"}), u0, src,
                                  Profile(-0.3, 2.0), 1.0)
    assert min(study["orders"]) >= 1.8
    assert abs(study["residuals"][-1]) < 1e-4


def test_kernel_csv(tmp_path):
    path = tmp_path / "kernel.csv"
    write_kernel_csv(MU1, 0.0, np.linspace(-1, 1, 5), [0.5, 1.0], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x1,y1,gamma,gamma0,gamma1"
    assert len(lines) == 11
    t, x, y, g, g0, g1 = map(float, lines[8].split(","))
    np.testing.assert_allclose(g - g0, g1, atol=1e-16)
    np.testing.assert_allclose(g, phi1(y - x + t, t), rtol=1e-15)
