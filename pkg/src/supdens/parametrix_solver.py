"""Parametrix / Volterra fixed-point solver for the joint density (d = 1).

The density of ``(M_t, X_t)`` under drift B solves

    p = p0 + A[p] + Bt[p],

    A[p](m, x; t)  = int_0^t ds int_{a<m} B(a) d/da[g_tau(2m - x - a)] P_<(m, a; s) da,
    Bt[p](m, x; t) = int_0^t ds int_{a<=m} B(a) p(m, a; s) d/da K_tau(m; a, x) da,

with ``tau = t - s``, ``g_tau(z) = (2z/tau) phi(z; tau)`` the Brownian joint
density kernel, ``K_tau(m; a, x) = phi(x - a; tau) - phi(2m - a - x; tau)``
the sub-density of paths whose maximum stays below m, and
``P_<(m, a; s) = int_{b<m} p(b, a; s) db``. Written as
``p = p0 - sum_k (p^{k,alpha} + p^{k,beta})``, the alpha terms add up to
``-A`` and the beta terms to ``-Bt``.

The solver writes ``p = p0 + r``. The first correction ``D1 = (A + Bt)[p0]``
is computed once by accurate quadrature (the seed is known in closed form);
the remainder solves ``r = D1 + (A + Bt)[r]`` by Picard iteration with a
product-integration grid operator: the iterate is piecewise linear in the
space variable a and in time, and the kernels are integrated exactly
against the hat functions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import _parametrix_kernels as _pk
from .brownian_reference import drifted_bm_joint_density, p0_seed, point_start
from .kernels import contraction_bound
from .model_core import ConfigurationError, JointDensityGrid, ModelSpec, TriangularGrid

__all__ = [
    "SolverSettings",
    "VolterraIterate",
    "DivergenceError",
    "apply_alpha_term",
    "apply_beta_term",
    "beta_b_integral",
    "seed_correction",
    "solve",
    "fit_ratio_constant",
    "fit_base_constant",
    "g_alpha_time_convolution",
    "bound_ratios",
    "contraction_check",
    "solve_transition_chain",
    "solve_d2_smoke",
]


class DivergenceError(RuntimeError):
    """Picard increments failed to decrease."""

    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


@dataclass(frozen=True)
class SolverSettings:
    """Quadrature settings.

    Attributes
    ----------
    n_s : int
        Gauss-Legendre nodes in theta for the seed correction (s = t sin^2 theta).
    n_a : int
        Gauss-Legendre nodes per Gaussian window in a.
    n_tau : int
        Nodes per time step for the product-integration weights (tau = u^2).
    nsig : float
        Half width of the a windows in product-Gaussian standard deviations.
    table_dx : float
        Spacing of the drift table used inside compiled loops.
    n_f0 : int
        Gauss-Hermite nodes for a non-degenerate initial law.
    alpha : float
        Hoelder exponent used for the theoretical bound sequence.
    """

    n_s: int = 64
    n_a: int = 32
    n_tau: int = 16
    nsig: float = 9.0
    table_dx: float = 5e-4
    n_f0: int = 16
    alpha: float = 0.5


@dataclass
class VolterraIterate:
    """Current Picard iterate and the size of the last increment."""

    density: JointDensityGrid
    n: int = 0
    sup_increment: float = float("nan")
    l1_increment: float = float("nan")
    settings: SolverSettings = field(default_factory=SolverSettings)
    history: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.history) != self.n:
            raise ValueError("iteration index inconsistent with history length")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _require_1d(model, grid):
    if model.d != 1 or grid.d != 1:
        raise ConfigurationError("the parametrix solver supports d = 1 (see solve_d2_smoke for d = 2)")


def _drift_tables(model, grid, settings):
    T = float(grid.T)
    pad = 12.0 * math.sqrt(T) + 4.0
    lo = grid.box[0] - pad
    hi = grid.box[1] + pad
    n = int(math.ceil((hi - lo) / settings.table_dx)) + 1
    a = lo + settings.table_dx * np.arange(n)
    b = np.ascontiguousarray(model.drift1(a[:, None]), dtype=float)
    db = np.ascontiguousarray(model.partials_fn(a[:, None])[:, 0], dtype=float)
    return b, db, float(lo), float(settings.table_dx)


def _theta_rule(n):
    x, w = np.polynomial.legendre.leggauss(n)
    th = 0.25 * np.pi * (x + 1.0)
    wt = 0.25 * np.pi * w
    # s = t sin^2 theta, ds = t sin(2 theta) d theta
    return np.sin(th) ** 2, wt * np.sin(2.0 * th)


def _x0_nodes(model, grid, settings):
    if point_start(model, grid):
        return np.array([float(model.f0_mean[0])]), np.array([1.0])
    x, w = np.polynomial.hermite_e.hermegauss(settings.n_f0)
    return model.f0_mean[0] + model.f0_width * x, w / w.sum()


def seed_correction(model: ModelSpec, grid: TriangularGrid, settings: SolverSettings = None):
    """``(A[p0], Bt[p0])`` on the grid by Gaussian-product quadrature.

    Both integrands are integrated by parts in a first, which moves the
    derivative from the kernel to ``B(a) p0`` and removes the near-diagonal
    cancellations of the raw form.
    """
    _require_1d(model, grid)
    settings = settings or SolverSettings()
    btab, dbtab, lo, dx = _drift_tables(model, grid, settings)
    su, sw = _theta_rule(settings.n_s)
    ax, aw = np.polynomial.legendre.leggauss(settings.n_a)
    x0s, w0s = _x0_nodes(model, grid, settings)
    A0, B0 = _pk.seed_correction(grid.x_nodes, grid.m_offset, grid.times, x0s, w0s,
                                 btab, dbtab, lo, dx, su, sw, ax, aw, float(settings.nsig))
    return A0, B0


def _ndtr_diff(lo, hi):
    """Phi(hi) - Phi(lo) without cancellation in the upper tail."""
    return np.where(lo > 0, special.ndtr(-lo) - special.ndtr(-hi), special.ndtr(hi) - special.ndtr(lo))


def _kernel_weights(tau, h, n_e, n_d):
    """Hat-integrated kernels at one tau (arrays over e or d)."""
    sig = np.sqrt(tau)
    e = np.arange(n_e, dtype=float)
    ph = lambda z: np.exp(-0.5 * z * z / tau) / np.sqrt(2 * np.pi * tau)

    def I1(n):
        return _ndtr_diff(n * h / sig, (n + 1) * h / sig)

    Jg = lambda n: 2.0 * ph(n * h) - 2.0 * ph((n + 1) * h)
    wA = np.where(e >= 1, (-Jg(e) + Jg(e - 1)) / h, 0.0)
    w2 = np.where(e >= 1, (I1(e) - I1(e - 1)) / h, 0.0)
    w2h = I1(e) / h
    d = np.arange(-n_d, n_d + 1, dtype=float)
    w1 = (-I1(d) + I1(d - 1)) / h
    w1h = -I1(d) / h
    return wA, w1, w1h, w2, w2h


def _time_weights(grid, settings):
    """Product-integration weights combined per slice lag.

    For lag ``lam = k - k'`` the weight is the integral of the kernel
    against the piecewise-linear time hat of slice k'.
    """
    K = grid.times.size
    dt = grid.dt
    h = grid.h
    n_e = 2 * grid.n_x + 2
    n_d = grid.n_x + 1
    ux, uw = np.polynomial.legendre.leggauss(settings.n_tau)
    shapes = [(K + 1, n_e), (K + 1, 2 * n_d + 1), (K + 1, 2 * n_d + 1), (K + 1, n_e), (K + 1, n_e)]
    old = [np.zeros(s) for s in shapes]
    new = [np.zeros(s) for s in shapes]
    for L in range(1, K + 1):
        u0, u1 = math.sqrt((L - 1) * dt), math.sqrt(L * dt)
        us = 0.5 * (u1 - u0) * ux + 0.5 * (u1 + u0)
        ws = 0.5 * (u1 - u0) * uw
        for u, w in zip(us, ws):
            tau = u * u
            lam_new = L - tau / dt
            jac = 2.0 * u * w
            ker = _kernel_weights(tau, h, n_e, n_d)
            for arr_o, arr_n, kv in zip(old, new, ker):
                arr_n[L] += jac * lam_new * kv
                arr_o[L] += jac * (1.0 - lam_new) * kv
    comb = []
    for arr_o, arr_n in zip(old, new):
        c = np.zeros((K, arr_o.shape[1]))
        for lam in range(K):
            if lam >= 1:
                c[lam] += arr_o[lam]
            c[lam] += arr_n[lam + 1]
        comb.append(c)
    WA, W1, W1h, W2, W2h = comb

    def cutoff(W, centred=False):
        out = np.zeros(K, dtype=np.int64)
        for lam in range(K):
            a = np.abs(W[lam])
            thr = 1e-17 * max(a.max(), 1e-300)
            idx = np.flatnonzero(a > thr)
            if idx.size == 0:
                out[lam] = 0
            elif centred:
                out[lam] = int(np.max(np.abs(idx - n_d)))
            else:
                out[lam] = int(idx.max())
        return out

    eA = cutoff(WA)
    d1 = np.maximum(cutoff(W1, True), cutoff(W1h, True))
    eB = np.maximum(cutoff(W2), cutoff(W2h))
    return dict(WA=WA, W1=W1, W1h=W1h, W2=W2, W2h=W2h, eA=eA, d1=d1, eB=eB)


def _grid_apply(R, bvals, grid, weights, do_a=True, do_b=True):
    Rf = np.zeros((grid.times.size + 1, grid.n_m, grid.n_x))
    Rf[1:] = R
    A, B = _pk.apply_grid_operator(
        Rf, bvals, grid.m_offset, grid.h, weights["WA"], weights["W1"], weights["W1h"],
        weights["W2"], weights["W2h"], weights["eA"], weights["d1"], weights["eB"], do_a, do_b)
    return A[1:], B[1:]


def _values(iterate):
    if isinstance(iterate, VolterraIterate):
        return iterate.density.values, iterate.density
    if isinstance(iterate, JointDensityGrid):
        return iterate.values, iterate
    return np.asarray(iterate, dtype=float), None


def _is_seed(dens):
    return dens is not None and dens.meta.get("source") == "p0_seed"


# --------------------------------------------------------------------------
# public operators
# --------------------------------------------------------------------------

def apply_alpha_term(iterate, model: ModelSpec, grid: TriangularGrid, k="all", settings=None):
    """Alpha terms of the representation applied to an iterate.

    Returns ``p^{k,alpha}`` in the subtractive sign convention: the sum over
    ``k in {'m', 'x1'}`` equals ``-A[p]``, with ``p^{m,alpha} = -2 A[p]`` and
    ``p^{x1,alpha} = A[p]``. When the iterate is the closed-form seed the
    accurate quadrature route is used, otherwise the grid operator.
    """
    _require_1d(model, grid)
    settings = settings or SolverSettings()
    vals, dens = _values(iterate)
    if _is_seed(dens):
        A, _ = seed_correction(model, grid, settings)
    else:
        w = _time_weights(grid, settings)
        A, _ = _grid_apply(vals, model.drift1(grid.x_nodes[:, None]), grid, w, True, False)
    factor = {"all": -1.0, "m": -2.0, "x1": 1.0}
    if k not in factor:
        raise ValueError("k must be 'all', 'm' or 'x1'")
    return factor[k] * A


def apply_beta_term(iterate, model: ModelSpec, grid: TriangularGrid, k="all", settings=None):
    """Beta terms of the representation applied to an iterate.

    Returns ``sum_k p^{k,beta} = -Bt[p]`` for ``k='all'``. The split keeps
    the indicator of the Brownian kernel inside the derivative: the m part is
    ``p^{m,beta} = int int B(a) p(m, a; s) g_tau(2m - x - a)`` and the x1 part
    is the remainder.
    """
    _require_1d(model, grid)
    settings = settings or SolverSettings()
    vals, dens = _values(iterate)
    if _is_seed(dens):
        _, B = seed_correction(model, grid, settings)
    else:
        w = _time_weights(grid, settings)
        _, B = _grid_apply(vals, model.drift1(grid.x_nodes[:, None]), grid, w, False, True)
    if k == "all":
        return -B
    if k not in ("m", "x1"):
        raise ValueError("k must be 'all', 'm' or 'x1'")
    pm = _beta_m_part(vals, model, grid, settings)
    return pm if k == "m" else -B - pm


def _beta_m_part(vals, model, grid, settings):
    """``int_0^t ds int_{a<=m} B(a) p(m, a; s) g_tau(2m - x - a) da`` on the grid
    (trapezoid in a, product integration in time)."""
    K = grid.times.size
    dt, h = grid.dt, grid.h
    b = model.drift1(grid.x_nodes[:, None])
    out = np.zeros_like(vals)
    ux, uw = np.polynomial.legendre.leggauss(settings.n_tau)
    J = np.arange(grid.n_m) + grid.m_offset
    idx = np.arange(grid.n_x)
    for k in range(K):
        for L in range(1, k + 2):
            u0, u1 = math.sqrt((L - 1) * dt), math.sqrt(L * dt)
            for u, w in zip(0.5 * (u1 - u0) * ux + 0.5 * (u1 + u0), 0.5 * (u1 - u0) * uw):
                tau = u * u
                lam_new = L - tau / dt
                for src, lw in ((k - L + 1, lam_new), (k - L, 1.0 - lam_new)):
                    if src < 0:
                        continue
                    for j in range(grid.n_m):
                        a = grid.x_nodes[: J[j] + 1]
                        z = 2 * grid.x_nodes[J[j]] - grid.x_nodes[idx, None] - a[None, :]
                        ker = 2.0 * z / tau * np.exp(-0.5 * z * z / tau) / np.sqrt(2 * np.pi * tau)
                        f = b[: J[j] + 1] * vals[src, j, : J[j] + 1]
                        wt = np.full(a.size, h)
                        wt[0] = wt[-1] = 0.5 * h
                        out[k, j] += 2.0 * u * w * lw * (ker @ (f * wt))
    return grid.remask(out)


def beta_b_integral(m, a, x, tau, k="x1"):
    """``int_{max(a,x)}^{m} d/dx^k p_W(b - a, x - a; tau) db`` in closed form.

    Classical derivatives inside the support. For k = 'x1' the integrand is
    ``-g'(2b - x - a)`` and the antiderivative in b is ``-g(2b - x - a)/2``;
    for k = 'm' it is ``2 g'(2b - x - a)`` with antiderivative
    ``g(2b - x - a)``.
    """
    from .brownian_reference import reflection_kernel as g

    lo = np.maximum(a, x)
    up = 2.0 * m - x - a
    low = 2.0 * lo - x - a
    if k == "x1":
        return -0.5 * (g(up, tau) - g(low, tau))
    if k == "m":
        return g(up, tau) - g(low, tau)
    raise ValueError("k must be 'm' or 'x1'")


# --------------------------------------------------------------------------
# fixed point
# --------------------------------------------------------------------------

def g_alpha_time_convolution(times, f, alpha):
    """``int_0^t (t - s)^(alpha/2 - 1) f(s) ds`` at each slice, with f piecewise
    linear between ``(0, 0)`` and the slice values (exact product integration)."""
    times = np.concatenate([[0.0], np.asarray(times, dtype=float)])
    fv = np.concatenate([[0.0], np.asarray(f, dtype=float)])
    beta = 0.5 * alpha - 1.0
    out = np.zeros(times.size - 1)
    for k in range(1, times.size):
        t = times[k]
        a, b = times[:k], times[1:k + 1]
        fa, fb = fv[:k], fv[1:k + 1]
        ua, ub = t - a, t - b  # u = t - s runs from ub to ua
        i0 = (ua ** (beta + 1) - ub ** (beta + 1)) / (beta + 1)
        i1 = (ua ** (beta + 2) - ub ** (beta + 2)) / (beta + 2)
        slope = (fb - fa) / (b - a)
        # f(s) = fa + slope (t - u - a)
        out[k - 1] = np.sum((fa + slope * (t - a)) * i0 - slope * i1)
    return out


def fit_base_constant(norm0, norm1, times, alpha):
    """Smallest C_T with ``|d_1|(t) <= (C_T/2) (g_alpha * |d_0|)(t)`` on the slices.

    This is the n = 1 step of the induction bound fitted to the first two
    Picard increments (slice-wise L1 norms).
    """
    conv = g_alpha_time_convolution(times, norm0, alpha)
    ok = conv > 0
    if not np.any(ok):
        return 0.0
    return float(2.0 * np.max(np.asarray(norm1)[ok] / conv[ok]))


def fit_ratio_constant(rho1, alpha, T):
    """C_T such that ``b_2 / b_1`` equals a given first ratio."""
    h = 0.5 * alpha
    return float(2.0 * rho1 * special.gamma(alpha) / (T ** h * special.gamma(h) ** 2))


def bound_ratios(n_max, alpha, C_T, T):
    """``b_{n+1} / b_n`` for n = 1..n_max."""
    n = np.arange(1, n_max + 1, dtype=float)
    h = 0.5 * alpha
    return 0.5 * C_T * T ** h * np.exp(special.gammaln(h) + special.gammaln(n * h) - special.gammaln((n + 1) * h))


def contraction_check(report, floor=1e-12):
    """Compare observed increment ratios with the fitted bound ratios.

    Ratios whose numerator is below ``floor`` times the first increment are
    at the round-off floor and are skipped. Returns a dict with the verdicts.
    """
    inc = np.asarray(report["increments_l1"])
    rho = np.asarray(report.get("ratios", []))
    br = np.asarray(report.get("bound_ratios", []))
    keep = inc[1:] > floor * inc[0] if inc.size > 1 else np.array([], bool)
    rho_k, br_k = rho[keep], br[keep]
    geometric = bool(rho_k.size > 0 and np.max(rho_k) < 1.0)
    within = bool(rho_k.size > 0 and np.all(rho_k <= br_k))
    return {"geometric": geometric, "q": float(np.max(rho_k)) if rho_k.size else float("nan"),
            "within_bound": within, "n_checked": int(rho_k.size)}


def _norms(diff, grid):
    w = grid.triangle_weights()
    l1 = float(grid.dt * np.sum(np.abs(diff) * w[None]))
    return l1, float(np.max(np.abs(diff))) if diff.size else 0.0


def solve(model: ModelSpec, grid: TriangularGrid, max_iter=50, tol=1e-10, settings=None,
          raise_on_divergence=True):
    """Picard iteration ``p^{(n+1)} = p0 - sum (alpha + beta)[p^{(n)}]``.

    Parameters
    ----------
    model, grid
        d = 1 model and grid.
    max_iter : int
        Maximum number of Picard passes.
    tol : float
        Stop once the space-time L1 norm of the increment is below tol.

    Returns
    -------
    density : JointDensityGrid
        Provenance 'parametrix' (or 'exact' for zero drift).
    report : dict
        Per-iteration increment norms and ratios, the bound sequence with the
        fitted constant, and quadrature settings.
    """
    _require_1d(model, grid)
    settings = settings or SolverSettings()
    p0 = p0_seed(model, grid)
    K = grid.times.size
    layer = math.sqrt(grid.times[0]) / grid.h
    report = {
        "grid": grid.describe(),
        "settings": settings.__dict__.copy(),
        "boundary_layer_cells": layer,
        "boundary_layer_resolved": bool(layer >= 8),
        "increments_l1": [],
        "increments_sup": [],
        "converged": False,
        "iterations": 0,
    }
    if layer < 8:
        warnings.warn(f"only {layer:.2f} cells within sqrt(t_1) of the diagonal; "
                      "early slices are under-resolved", RuntimeWarning, stacklevel=2)
    if model.drift_kind == "zero":
        report.update(converged=True, iterations=0)
        return JointDensityGrid(grid, p0.values, "exact", meta={"source": "parametrix", "report": report}), report

    A0, B0 = seed_correction(model, grid, settings)
    D1 = grid.remask(A0 + B0)
    weights = _time_weights(grid, settings)
    bvals = np.ascontiguousarray(model.drift1(grid.x_nodes[:, None]), dtype=float)

    tw = grid.triangle_weights()
    slice_norms = []
    r = np.zeros_like(D1)
    rising = 0
    for n in range(max_iter):
        if n == 0:
            r_new = D1.copy()
        else:
            A, B = _grid_apply(r, bvals, grid, weights)
            r_new = grid.remask(D1 + A + B)
        diff = r_new - r
        l1, sup = _norms(diff, grid)
        if n < 2:
            slice_norms.append(np.einsum("kji,ji->k", np.abs(diff), tw))
        report["increments_l1"].append(l1)
        report["increments_sup"].append(sup)
        r = r_new
        report["iterations"] = n + 1
        inc = report["increments_l1"]
        if len(inc) >= 2 and inc[-1] >= inc[-2]:
            rising += 1
        else:
            rising = 0
        if l1 < tol:
            report["converged"] = True
            break
        if rising >= 3:
            report["diverged"] = True
            if raise_on_divergence:
                raise DivergenceError("Picard increments did not decrease for 3 iterations", report)
            break

    inc = np.asarray(report["increments_l1"])
    ratios = inc[1:] / inc[:-1] if inc.size > 1 else np.array([])
    report["ratios"] = ratios.tolist()
    if len(slice_norms) == 2:
        C_T = fit_base_constant(slice_norms[0], slice_norms[1], grid.times, settings.alpha)
        report["fitted_C_T"] = C_T
        report["bound_ratios"] = bound_ratios(ratios.size, settings.alpha, C_T, grid.T).tolist()
        report["bound_sequence"] = contraction_bound(np.arange(1, inc.size + 1), settings.alpha, C_T,
                                                     0.5 * (grid.box[1] - grid.box[0]), grid.T, 1).tolist()
        report["contraction"] = contraction_check(report)
    p = p0.values + r
    dens = JointDensityGrid(grid, p, "parametrix",
                            meta={"source": "parametrix", "report": report, "correction": r})
    report["mass"] = dens.mass().tolist()
    report["min_value"] = float(p.min())
    return dens, report


# --------------------------------------------------------------------------
# frozen-drift transition chain (d = 1 cross-check, d = 2 smoke path)
# --------------------------------------------------------------------------

def _xt_transition(model, qa, xt, dt, gx, gw):
    """``G[q, r, l] = int L_r(u) phi(xt_l - u - B^2(a_q, u) dt; dt) du`` with
    ``L_r`` the piecewise-cubic cardinal functions on the x~ nodes, by Gauss
    points per cell."""
    k = xt[1] - xt[0]
    n = xt.size
    uc = np.repeat(np.arange(n - 1), gx.size)
    uu = np.tile(0.5 * (gx + 1.0), n - 1)
    us = xt[uc] + k * uu
    uw = np.tile(0.5 * k * gw, n - 1)
    sidx, sw = _lagrange_stencils(uc, uu, n)
    card = np.zeros((us.size, n))
    np.add.at(card, (np.repeat(np.arange(us.size), 4), sidx[:, 0].ravel()), sw[:, 0].ravel())
    pts = np.stack(np.broadcast_arrays(qa[:, None], us[None, :]), axis=-1).reshape(-1, 2)
    b2 = np.asarray(model.drift(pts), dtype=float)[:, 1].reshape(qa.size, us.size)
    G = np.empty((qa.size, n, n))
    for q in range(qa.size):
        y = xt[None, :] - us[:, None] - b2[q][:, None] * dt
        kern = np.exp(-0.5 * y * y / dt) / math.sqrt(2 * np.pi * dt)
        G[q] = (card * uw[:, None]).T @ kern
    return G


def _lagrange_stencils(qc, qu, n):
    """Four-point Lagrange stencils for points in cells ``qc`` at local
    coordinate ``qu``: variant 0 uses nodes c-1..c+2, variant 1 c-2..c+1.
    Index -1 marks an unavailable stencil (linear fallback)."""
    idx = np.full((qc.size, 2, 4), -1, dtype=np.int64)
    wts = np.zeros((qc.size, 2, 4))
    for v, shift in enumerate((1, 2)):
        base = np.clip(qc - shift, 0, n - 4)
        ok = (qc - shift >= 0) | (v == 0)
        pos = qc + qu - base
        for s in range(4):
            w = np.ones(qc.size)
            for r in range(4):
                if r != s:
                    w *= (pos - r) / (s - r)
            idx[:, v, s] = np.where(ok, base + s, -1)
            wts[:, v, s] = w
    return idx, wts


def _mass_below(cur, off, h):
    """``int_{start}^{m_j} p(b, a_l) db`` per column (trapezoid with the
    Gregory end corrections, fourth order once three rows are available)."""
    nm, nx = cur.shape[:2]
    start = np.maximum(np.arange(nx) - off, 0)
    rows = np.arange(nm)[:, None]
    live = (rows >= start[None, :])[:, :, None]
    f = np.where(live, cur, 0.0)
    part = 0.5 * h * (f[1:] + f[:-1]) * (rows[1:] > start[None, :])[:, :, None]
    cum = np.zeros_like(cur)
    cum[1:] = np.cumsum(part, axis=0)
    # end corrections -h^2/12 (f'(b_j) - f'(b_start)) with one-sided differences
    n_in = rows - start[None, :]
    fj = np.zeros_like(cur)
    fj[2:] = (3.0 * f[2:] - 4.0 * f[1:-1] + f[:-2]) / (2.0 * h)
    cols = np.arange(nx)
    s0 = np.minimum(start, nm - 3)
    fs = (-3.0 * f[s0, cols] + 4.0 * f[s0 + 1, cols] - f[s0 + 2, cols]) / (2.0 * h)
    corr = (h * h / 12.0) * (fj - fs[None])
    ok = (n_in >= 2)[:, :, None] & (start[None, :, None] + 2 < nm)
    cum = cum - np.where(ok, corr, 0.0)
    # first interval above the start row: quadratic through three rows
    one = (n_in == 1)[:, :, None] & (start[None, :, None] + 2 < nm)
    s2 = np.minimum(start + 2, nm - 1)
    first = h * (5.0 * f[s0, cols] + 8.0 * f[np.minimum(s0 + 1, nm - 1), cols] - f[s2, cols]) / 12.0
    cum = np.where(one, first[None], cum)
    return np.where(live, cum, 0.0)


def _frozen_start(model, grid, t, n_f0):
    """Frozen-drift joint density at time t from the initial law."""
    if model.f0_width < 1e-6 or model.descriptor.get("f0", {}).get("kind") == "point":
        starts = [(np.asarray(model.f0_mean, dtype=float), 1.0)]
    else:
        z, w = np.polynomial.hermite_e.hermegauss(n_f0)
        w = w / w.sum()
        if model.d == 1:
            starts = [(model.f0_mean + model.f0_width * np.array([zi]), wi) for zi, wi in zip(z, w)]
        else:
            starts = [(model.f0_mean + model.f0_width * np.array([zi, zj]), wi * wj)
                      for zi, wi in zip(z, w) for zj, wj in zip(z, w)]
    M = grid.m_nodes[:, None]
    X = grid.x_nodes[None, :]
    out = 0.0
    for x0, w0 in starts:
        mu = np.asarray(model.drift(x0[None, :]), dtype=float).reshape(-1)
        v = drifted_bm_joint_density(M, X, t, float(mu[0]), float(x0[0]))
        if model.d == 2:
            v = v[:, :, None] * (np.exp(-0.5 * (grid.xt_nodes[0] - x0[1] - mu[1] * t) ** 2 / t)
                                 / math.sqrt(2 * np.pi * t))[None, None, :]
        out = out + w0 * v
    return grid.remask(out)


def solve_transition_chain(model: ModelSpec, grid: TriangularGrid, n_sub=1, n_q=None, n_f0=8, start_cells=3.0):
    """Joint density by iterating the frozen-drift transition.

    Over a step ``dt`` the drift is frozen at the source point and the
    transition of (running max, position) is the closed-form reflected
    Gaussian with that drift; this is the time-discrete parametrix. The
    source integrals use ``n_q`` Gauss points per cell on the piecewise-cubic
    interpolant of the density. The law is
    started from the frozen-drift density at the first time where the
    diagonal layer spans two cells. Weak error is first order in the step.

    Parameters
    ----------
    n_sub : int
        Transition steps per grid slice.
    n_q : int, optional
        Gauss points per cell; default resolves ``sqrt(dt)`` with 4 points.

    Returns
    -------
    density : JointDensityGrid
        Provenance 'parametrix'.
    report : dict
    """
    if model.d != grid.d or model.d not in (1, 2):
        raise ConfigurationError("transition chain supports d = 1 and d = 2 with matching grid")
    h = grid.h
    K = grid.times.size
    dt = grid.dt / n_sub
    if n_q is None:
        n_q = int(min(16, max(2, math.ceil(4.0 * h / math.sqrt(dt)))))
    gx, gw = np.polynomial.legendre.leggauss(n_q)
    qu = np.tile(0.5 * (gx + 1.0), grid.n_x - 1)
    qc = np.repeat(np.arange(grid.n_x - 1), n_q)
    qa = grid.x_nodes[qc] + h * qu
    qw = np.tile(0.5 * h * gw, grid.n_x - 1)
    sidx, sw = _lagrange_stencils(qc, qu, grid.n_x)
    xt = grid.xt_nodes[0] if grid.d == 2 else np.zeros(1)
    nt = xt.size
    pts = np.stack(np.broadcast_arrays(qa[:, None], xt[None, :]), axis=-1).reshape(-1, 2)
    if grid.d == 1:
        B = np.asarray(model.drift(pts[:, :1]), dtype=float).reshape(qa.size, 1, 1)
    else:
        B = np.asarray(model.drift(pts), dtype=float).reshape(qa.size, nt, 2)
    mu1 = np.ascontiguousarray(B[..., 0])
    if grid.d == 2:
        G = _xt_transition(model, qa, xt, dt, gx, gw)
    else:
        G = np.ones((qa.size, 1, 1))
    G = np.ascontiguousarray(G)

    layer = (start_cells * h) ** 2
    k0 = int(min(max(0, K // 4 - 1), max(0, math.ceil(layer / grid.dt) - 1)))
    shape = (K, grid.n_m, grid.n_x) + ((nt,) if grid.d == 2 else ())
    vals = np.zeros(shape)
    for k in range(k0 + 1):
        vals[k] = _frozen_start(model, grid, float(grid.times[k]), n_f0)
    cur = vals[k0].reshape(grid.n_m, grid.n_x, nt)
    masks = grid.mask[:, :, None]
    for k in range(k0 + 1, K):
        for _ in range(n_sub):
            cum = _mass_below(cur, grid.m_offset, h)
            cur = _pk.chain_step(np.ascontiguousarray(cur), np.ascontiguousarray(cum), grid.m_offset, h,
                                 grid.x_nodes, qa, qc.astype(np.int64), sidx, sw, qw, mu1, G, dt)
            cur = np.where(masks, cur, 0.0)
        vals[k] = cur.reshape(shape[1:])
    dens = JointDensityGrid(grid, vals, "parametrix", meta={"source": "transition_chain"})
    report = {"grid": grid.describe(), "n_sub": n_sub, "n_q": n_q, "start_slice": k0,
              "mass": dens.mass().tolist(), "min_value": float(vals.min())}
    return dens, report


def solve_d2_smoke(model: ModelSpec, grid: TriangularGrid, n_sub=4, max_cells=48):
    """Smoke-scale d = 2 joint density (frozen-drift transition chain).

    Cost grows like ``n^5`` per step, so grids above ``max_cells`` cells
    per axis are refused.
    """
    if model.d != 2:
        raise ConfigurationError("solve_d2_smoke needs a two-dimensional model")
    if grid.n_x - 1 > max_cells or any(a.size - 1 > max_cells for a in grid.xt_nodes):
        raise ConfigurationError(f"d = 2 is supported at smoke scale only (at most {max_cells} cells per axis)")
    return solve_transition_chain(model, grid, n_sub=n_sub)
