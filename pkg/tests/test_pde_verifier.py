import warnings

import numpy as np
import pytest

from supdens.brownian_reference import exact_density_grid, p0_seed
from supdens.kernels import Profile, contraction_bound
from supdens.model_core import JointDensityGrid, TriangularGrid, build_model, default_grid, make_test_function
from supdens.pde_verifier import (
    ResolutionError,
    SupportError,
    contraction_replay,
    default_battery,
    diagonal_volterra_residual,
    membership_refinement,
    qh_evolution_residual,
    refinement_orders,
    strong_boundary_residual,
    weak_battery,
    weak_residual,
)
from supdens.parametrix_solver import solve

ZERO = build_model({"kind": "zero"}, {"kind": "point"})
MU1 = build_model({"kind": "constant", "mu": 1.0}, {"kind": "point"})
TANH = build_model("tanh(x1)", {"kind": "point"})


def _grid(n, K):
    return TriangularGrid.uniform(-2.25, 4.5, n, 1.0, K, m_lo=0.0)


@pytest.fixture(scope="module")
def exact_mu1():
    g = _grid(432, 32)
    return exact_density_grid(MU1, g)


def test_weak_battery_passes_on_exact_densities(exact_mu1):
    for model, p in ((ZERO, p0_seed(ZERO, exact_mu1.grid)), (MU1, exact_mu1)):
        reps = weak_battery(p, model)
        assert len(reps) == 12
        for r in reps:
            assert r.passed, r.to_dict()


def test_weak_residual_at_interior_time(exact_mu1):
    phi = default_battery(MU1)[0]
    r = weak_residual(exact_mu1, MU1, phi, t=0.5)
    assert r.t == 0.5 and r.passed


def test_weak_battery_detects_a_wrong_density(exact_mu1):
    # the zero-drift density is not a weak solution for B = 1
    p = p0_seed(ZERO, exact_mu1.grid)
    reps = weak_battery(p, MU1)
    assert not any(r.passed for r in reps)
    assert max(abs(r.residual) for r in reps) > 1e-2


def test_support_error():
    g = _grid(54, 4)
    p = p0_seed(ZERO, g)
    with pytest.raises(SupportError):
        weak_residual(p, ZERO, make_test_function("bump", (4.0, 0.0), 1.0))
    with pytest.raises(SupportError):
        weak_residual(p, ZERO, make_test_function("bump", (1.0, -2.0), 1.0))


def test_refinement_orders_helper():
    np.testing.assert_allclose(refinement_orders([1.0, 0.25, 0.0625]), [2.0, 2.0])


def test_strong_boundary_exact_densities():
    res = []
    for n in (64, 128, 256):
        g = default_grid(MU1, 1.0, n, 4)
        sb = strong_boundary_residual(exact_density_grid(MU1, g), MU1)
        assert sb.max_abs <= 10 * sb.h
        res.append(sb.max_abs)
    assert res[2] < res[1] < res[0]
    sb = strong_boundary_residual(p0_seed(ZERO, default_grid(ZERO, 1.0, 128, 4)), ZERO)
    assert sb.max_abs <= 10 * sb.h


def test_strong_boundary_flags_wrong_drift():
    g = default_grid(MU1, 1.0, 512, 4)
    sb = strong_boundary_residual(exact_density_grid(MU1, g), ZERO)
    assert sb.max_abs > 10 * sb.h


def test_strong_boundary_resolution_error():
    g = TriangularGrid.uniform(0.0, 0.5, 2, 1.0, 1, m_lo=0.0)
    with pytest.raises(ResolutionError):
        strong_boundary_residual(p0_seed(ZERO, g), ZERO)


def test_membership_of_exact_density_converges():
    model = build_model({"kind": "constant", "mu": 1.0}, {"kind": "gaussian", "width": 0.5})
    dens = [exact_density_grid(model, default_grid(model, 1.0, n, K)) for n, K in ((32, 8), (64, 16), (128, 32))]
    out = membership_refinement(dens)
    assert not out["diverging"]
    for lv in out["levels"]:
        assert all(np.isfinite(lv[k]) for k in ("a", "b", "c_gap", "c_sup_integral"))
    # the diagonal trace has a one-sided linear limit from the interior
    assert out["c_gap"][-1] < out["c_gap"][0]


def test_membership_of_point_start_grows():
    # a point start sits outside the class near t = 0: the x-marginal of
    # slice t has squared L2 norm of order t^(-1/2)
    dens = [exact_density_grid(MU1, default_grid(MU1, 1.0, n, K)) for n, K in ((32, 8), (64, 16), (128, 32))]
    out = membership_refinement(dens)
    assert out["flags"]["a"] and out["a"][2] > out["a"][1] > out["a"][0]


def test_membership_flags_a_blowing_up_sequence():
    dens = []
    for n, K in ((32, 8), (64, 16), (128, 32)):
        g = default_grid(MU1, 1.0, n, K)
        p = exact_density_grid(MU1, g)
        v = p.values.copy()
        # a spike on the start row growing like 1/h
        v[:, 0, :] += 1.0 / g.h
        dens.append(JointDensityGrid(g, v, "parametrix"))
    assert membership_refinement(dens)["diverging"]


@pytest.mark.parametrize("model", [ZERO, MU1], ids=["zero", "constant"])
def test_diagonal_volterra_of_equal_densities_is_zero(model):
    g = default_grid(model, 1.0, 32, 8)
    p = exact_density_grid(model, g) if model is MU1 else p0_seed(model, g)
    r = diagonal_volterra_residual(p, p, model)
    assert np.all(r == 0.0)


def test_diagonal_volterra_two_dimensional_zero():
    model = build_model({"kind": "constant", "mu": [0.5, -0.3]}, {"kind": "point"}, d=2)
    g = default_grid(model, 1.0, 16, 4, tail=1e-4)
    p = exact_density_grid(model, g)
    assert np.all(diagonal_volterra_residual(p, p, model) == 0.0)


def test_diagonal_volterra_is_nonzero_for_distinct_densities():
    g = default_grid(MU1, 1.0, 32, 8)
    p = exact_density_grid(MU1, g)
    q = p0_seed(MU1, g)
    assert np.max(np.abs(diagonal_volterra_residual(p, q, MU1))) > 1e-3


def test_qh_evolution_zero_for_equal_densities():
    g = default_grid(MU1, 1.0, 64, 16)
    p = exact_density_grid(MU1, g)
    H, F = Profile(2.0, 1.5), Profile(0.0, 1.5)
    assert qh_evolution_residual(p, p, MU1, H, F) == 0.0
    res, terms = qh_evolution_residual(p, p0_seed(MU1, g), MU1, H, F, return_terms=True)
    assert set(terms) == {"lhs", "generator", "boundary"}


def test_qh_evolution_parametrix_against_exact_shrinks():
    res = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for n, K in ((32, 8), (64, 16)):
            g = default_grid(MU1, 1.0, n, K)
            p, _ = solve(MU1, g)
            res.append(abs(qh_evolution_residual(p, exact_density_grid(MU1, g), MU1, Profile(2.0, 1.5),
                                                 Profile(0.0, 1.5))))
    assert res[1] < res[0] < 0.05


def test_contraction_replay_within_fitted_bound():
    mu = build_model({"kind": "constant", "mu": 0.5}, {"kind": "point"})
    rep = contraction_replay(mu)
    assert rep["all_pass"]
    assert rep["n"] == list(range(1, 11))
    lhs = np.array(rep["lhs"])
    assert np.all(np.diff(lhs) < 0)
    np.testing.assert_allclose(rep["bound"], contraction_bound(np.arange(1, 11), 0.5, rep["C_T"], 1.0, 1.0)
                               * rep["norm0"], rtol=1e-12)
    # with the time factor integrated exactly the diagonal-only constant suffices
    assert all(rep["pass_exact_time_integral_diagonal_C"])


def test_contraction_replay_needs_exact_kernel():
    with pytest.raises(Exception):
        contraction_replay(TANH)
