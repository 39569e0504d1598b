"""Closed-form joint laws of Brownian motion and its running supremum.

For a Brownian motion started at x0 the reflection principle gives

    p(m, x; t) = 2 (2m - x - x0) / sqrt(2 pi t^3) exp(-(2m - x - x0)^2 / (2t)),

for m >= max(x, x0), and zero otherwise. A constant drift mu multiplies
the density by the Girsanov weight exp(mu (x - x0) - mu^2 t / 2).
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .kernels import phi1
from .model_core import ConfigurationError, JointDensityGrid, ModelSpec, TriangularGrid

__all__ = [
    "reflection_kernel",
    "bm_joint_density",
    "bm_sup_cdf",
    "drifted_bm_joint_density",
    "drifted_joint_cdf",
    "drifted_sup_cdf",
    "drifted_sup_mean",
    "p0_seed",
    "exact_density_grid",
    "gaussian_domination_constant",
]


def _check_t(t):
    if np.any(np.asarray(t) <= 0):
        raise ValueError("t must be positive")


def reflection_kernel(z, t):
    """``g_t(z) = (2z/t) phi(z; t) = -2 d/dz phi(z; t)`` (odd in z)."""
    z = np.asarray(z, dtype=float)
    return 2.0 * z / t * phi1(z, t)


def bm_joint_density(m, x, t, x0=0.0):
    """Joint density of ``(sup_{s<=t} W^1_s, W_t)`` for W started at x0.

    Parameters
    ----------
    m : float or array_like
        Supremum value.
    x : float or array_like
        End point. For d > 1 the coordinates are on the last axis and
        ``x0`` must have d entries.
    t : float
        Time, positive.
    x0 : float or array_like
        Start point.

    Returns
    -------
    ndarray
        Non-negative density; zero when ``m < max(x^1, x0^1)``.
    """
    _check_t(t)
    x0 = np.asarray(x0, dtype=float)
    m = np.asarray(m, dtype=float)
    x = np.asarray(x, dtype=float)
    if x0.ndim == 0 or x0.size == 1:
        x1, x01, rest = x, float(x0.reshape(-1)[0]), 1.0
    else:
        x1, x01 = x[..., 0], x0[0]
        xt = x[..., 1:] - x0[1:]
        rest = np.exp(-0.5 * np.sum(xt * xt, axis=-1) / t) / (2 * np.pi * t) ** (0.5 * xt.shape[-1])
    z = 2.0 * m - x1 - x01
    inside = (m >= x1) & (m >= x01)
    return np.where(inside, reflection_kernel(z, t), 0.0) * rest


def bm_sup_cdf(m, t, x0=0.0):
    """``P(M_t <= m) = 2 Phi((m - x0)/sqrt(t)) - 1`` for m >= x0, else 0."""
    _check_t(t)
    m = np.asarray(m, dtype=float)
    u = (m - x0) / np.sqrt(t)
    # erf form keeps full relative precision for small u
    return np.where(m >= x0, special.erf(u / np.sqrt(2.0)), 0.0)


def drifted_bm_joint_density(m, x, t, mu, x0=0.0):
    """Joint density of ``(M_t, X_t)`` for ``X = x0 + mu t + W`` (d = 1)."""
    _check_t(t)
    m = np.asarray(m, dtype=float)
    x = np.asarray(x, dtype=float)
    z = 2.0 * m - x - x0
    # one exponent for the reflection kernel and the Girsanov weight
    expo = -0.5 * z * z / t + mu * (x - x0) - 0.5 * mu * mu * t
    dens = 2.0 * z / np.sqrt(2.0 * np.pi * t ** 3) * np.exp(expo)
    return np.where((m >= x) & (m >= x0), dens, 0.0)


def drifted_joint_cdf(m, x, t, mu, x0=0.0):
    """``P(M_t <= m, X_t <= x)`` for drifted Brownian motion (d = 1).

    For ``x <= m`` this is ``Phi((x - x0 - mu t)/sqrt t) - exp(2 mu (m - x0))
    Phi((x - 2m + x0 - mu t)/sqrt t)``; for ``x > m`` it is ``P(M_t <= m)``.
    """
    _check_t(t)
    m = np.asarray(m, dtype=float)
    x = np.asarray(x, dtype=float)
    xx = np.minimum(x, m)
    s = np.sqrt(t)
    a = special.ndtr((xx - x0 - mu * t) / s)
    # exp(2 mu u) Phi(v) evaluated in log space to avoid overflow
    v = (xx - 2.0 * m + x0 - mu * t) / s
    with np.errstate(over="ignore", invalid="ignore"):
        b = np.exp(2.0 * mu * (m - x0) + special.log_ndtr(v))
    out = np.where(m >= x0, a - b, 0.0)
    return np.clip(out, 0.0, 1.0)


def drifted_sup_cdf(m, t, mu, x0=0.0):
    """``P(M_t <= m)`` for drifted Brownian motion."""
    _check_t(t)
    m = np.asarray(m, dtype=float)
    s = np.sqrt(t)
    u = m - x0
    with np.errstate(over="ignore", invalid="ignore"):
        b = np.exp(2.0 * mu * u + special.log_ndtr((-u - mu * t) / s))
    return np.where(u >= 0, special.ndtr((u - mu * t) / s) - b, 0.0)


def drifted_sup_mean(t, mu, x0=0.0):
    """``E[M_t]`` for drifted Brownian motion started at x0.

    ``E[M_t - x0] = int_0^inf P(M_t > u) du``; closed form
    ``(mu t/2 + 1/(2 mu)) (2 Phi(mu sqrt t) - 1) + mu t / 2 + sqrt(t) phi(mu sqrt t)``
    reduces to ``sqrt(2t/pi)`` at mu = 0.
    """
    if mu == 0:
        return x0 + np.sqrt(2.0 * t / np.pi)
    s = np.sqrt(t)
    a = mu * s
    return x0 + (0.5 * mu * t + 0.5 / mu) * special.erf(a / np.sqrt(2.0)) + 0.5 * mu * t \
        + s * np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi)


# --------------------------------------------------------------------------
# grid fills
# --------------------------------------------------------------------------

def _mixture_first_axis(fn, model, upper, tol=1e-8, n_start=8, n_max=256):
    """Mixture ``int f0(a) fn(a) da`` over the first coordinate of the start.

    The integrand vanishes for ``a > m``, so each m row is integrated by
    Gauss-Legendre over ``[mean - 12 w, min(m, mean + 12 w)]`` where it is
    smooth. ``upper`` holds m per row (broadcastable against the fill).
    The node count doubles until the fill changes by less than ``tol``.
    """
    mean, w = float(model.f0_mean[0]), float(model.f0_width)
    lo = mean - 12.0 * w
    span = np.clip(np.minimum(upper, mean + 12.0 * w) - lo, 0.0, None)
    prev = None
    n = n_start
    while n <= n_max:
        y, wy = np.polynomial.legendre.leggauss(n)
        cur = 0.0
        for yi, wi in zip(y, wy):
            a = lo + 0.5 * span * (yi + 1.0)
            cur = cur + (0.5 * wi) * span * phi1(a - mean, w * w) * fn(a)
        if prev is not None and np.max(np.abs(cur - prev)) < tol:
            return cur, n
        prev, n = cur, 2 * n
    raise ArithmeticError(f"initial-law mixture did not converge with {n_max} nodes "
                          f"(last change {np.max(np.abs(cur - prev)):.3g})")


def point_start(model: ModelSpec, grid: TriangularGrid):
    """True when the grid treats the initial law as a point mass at its mean
    (m rows start on the mean and the width is below the lattice scale)."""
    x0 = float(model.f0_mean[0])
    narrow = model.f0_width < 0.05 * grid.h or model.descriptor.get("f0", {}).get("kind") == "point"
    return abs(grid.m_nodes[0] - x0) < 1e-9 * max(1.0, abs(x0)) + 1e-12 and narrow


def _fill(model, grid, density_1d, mu2=None):
    """Evaluate ``density_1d(M, X, t, x0)`` on the grid and mix over f0.

    For d = 2 the second coordinate is an independent Gaussian with drift
    ``mu2`` (the model's constant drift when omitted).
    """
    M = grid.m_nodes[:, None]
    X = grid.x_nodes[None, :]
    K = grid.times.size
    out = np.zeros((K, grid.n_m, grid.n_x))
    meta = {}
    if point_start(model, grid):
        x0 = float(model.f0_mean[0])
        for k, t in enumerate(grid.times):
            out[k] = density_1d(M, X, t, x0)
        # substitution error of the point-mass stand-in, measured off the start row
        probe = grid.m_nodes[grid.m_nodes > x0 + 4 * model.f0_width]
        if probe.size:
            k = K - 1
            t = grid.times[k]
            Mp = probe[:, None]
            ref, _ = _mixture_first_axis(lambda a: density_1d(Mp, X, t, a), model, Mp)
            meta["f0_substitution_error"] = float(np.max(np.abs(ref - density_1d(Mp, X, t, x0))))
        meta["point_start"] = True
    else:
        nodes_used = 0
        for k, t in enumerate(grid.times):
            out[k], n = _mixture_first_axis(lambda a: density_1d(M, X, t, a), model, M)
            nodes_used = max(nodes_used, n)
        meta["f0_nodes"] = nodes_used
        meta["point_start"] = False
    if grid.d == 2:
        xt = grid.xt_nodes[0]
        c = float(model.f0_mean[1])
        if mu2 is None:
            mu2 = 0.0 if model.mu is None else float(model.mu[1])
        fac = np.stack([phi1(xt - c - mu2 * t, t + model.f0_width ** 2) for t in grid.times])
        out = out[..., None] * fac[:, None, None, :]
    return out, meta


def _bm_1d(M, X, t, a):
    return drifted_bm_joint_density(M, X, t, 0.0, a)


def p0_seed(model: ModelSpec, grid: TriangularGrid) -> JointDensityGrid:
    """f0-mixture of the Brownian joint density on the grid.

    Provenance is 'exact' for zero drift (the seed is then the answer) and
    'parametrix' otherwise.
    """
    if grid.d != model.d:
        raise ConfigurationError("grid and model dimensions differ")
    # the seed is driftless in every coordinate
    vals, meta = _fill(model, grid, _bm_1d, mu2=0.0)
    prov = "exact" if model.drift_kind == "zero" else "parametrix"
    meta["source"] = "p0_seed"
    return JointDensityGrid(grid, vals, prov, meta=meta)


def exact_density_grid(model: ModelSpec, grid: TriangularGrid) -> JointDensityGrid:
    """Closed-form density for zero or constant drift."""
    if model.drift_kind not in ("zero", "constant"):
        raise ConfigurationError("closed form needs zero or constant drift")
    mu1 = float(model.mu[0])

    def dens(M, X, t, a):
        return drifted_bm_joint_density(M, X, t, mu1, a)

    vals, meta = _fill(model, grid, dens)
    meta["source"] = "closed_form"
    return JointDensityGrid(grid, vals, "exact", meta=meta)


def gaussian_domination_constant(t, m, x, x0=0.0, mu=0.0):
    """Smallest C with ``p(m, x; t) <= C phi_2((m - x0, m - x); 2t)`` on the
    given nodes (d = 1)."""
    m = np.asarray(m, dtype=float)
    x = np.asarray(x, dtype=float)
    p = drifted_bm_joint_density(m, x, t, mu, x0)
    u, v = m - x0, m - x
    log_env = -(u * u + v * v) / (4.0 * t) - np.log(4.0 * np.pi * t)
    inside = p > 0
    if not np.any(inside):
        return 0.0
    return float(np.max(np.exp(np.log(p[inside]) - log_env[inside])))
