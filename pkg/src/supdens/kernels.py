"""Gaussian kernel algebra and special-function utilities.

Contents
--------
phi                      isotropic Gaussian density with variance parameter t
gaussian_convolve_check  analytic vs quadrature convolution of two Gaussians
g_alpha_power            closed-form convolution powers of t -> t^(alpha/2 - 1)
g_alpha_power_numeric    iterated numerical convolution oracle for the above
contraction_bound        the sequence b_n driving the uniqueness argument
mollifier                compactly supported smooth bump with unit mass
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, special

__all__ = [
    "GaussianKernelParams",
    "KernelEstimateParams",
    "Profile",
    "phi",
    "phi1",
    "gaussian_convolve_check",
    "g_alpha",
    "g_alpha_power",
    "g_alpha_power_numeric",
    "g_alpha_recursion_numeric",
    "contraction_bound",
    "log_contraction_bound",
    "contraction_bound_direct",
    "first_n_below",
    "bump_constant",
    "mollifier",
]

_SQRT2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianKernelParams:
    """Dimension and variance parameter of phi_k(.; t)."""

    k: int
    t: float

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("dimension must be positive")
        if not self.t > 0:
            raise ValueError("variance parameter t must be positive")


@dataclass(frozen=True)
class KernelEstimateParams:
    """Constants of the short-time Gaussian bounds on the kernel correction.

    Attributes
    ----------
    alpha : float
        Hoelder exponent in (0, 1).
    C : float
        Prefactor. Fitted empirically, never given numerically.
    c : float
        Variance inflation in ``exp(-|x - y|^2 / (c t))``.
    T : float
        Horizon.
    """

    alpha: float = 0.5
    C: float = 1.0
    c: float = 4.0
    T: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not (self.C > 0 and self.c > 0 and self.T > 0):
            raise ValueError("C, c and T must be positive")


# --------------------------------------------------------------------------
# Gaussian densities
# --------------------------------------------------------------------------

def phi1(u, t):
    """Elementwise one-dimensional Gaussian density with variance t."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("variance parameter t must be positive")
    u = np.asarray(u, dtype=float)
    return np.exp(-0.5 * u * u / t) / np.sqrt(2.0 * np.pi * t)


def phi(u, t, k=None):
    """Isotropic Gaussian density ``(2 pi t)^(-k/2) exp(-|u|^2 / (2 t))``.

    Parameters
    ----------
    u : float or array_like
        A scalar is a point of R. An array is read as points with the
        coordinates on the last axis, unless ``k == 1`` in which case it is
        evaluated elementwise.
    t : float
        Variance parameter, must be positive.
    k : int, optional
        Dimension. Inferred from ``u`` when omitted.

    Returns
    -------
    float or ndarray
    """
    if not np.all(np.asarray(t) > 0):
        raise ValueError("variance parameter t must be positive")
    u = np.asarray(u, dtype=float)
    if k == 1 or u.ndim == 0:
        return phi1(u, t)
    kk = u.shape[-1]
    if k is not None and k != kk:
        raise ValueError(f"point has {kk} coordinates, expected {k}")
    r2 = np.sum(u * u, axis=-1)
    return np.exp(-0.5 * r2 / t) / (2.0 * np.pi * t) ** (0.5 * kk)


def gaussian_convolve_check(a, b, s, r, k=None, epsabs=1e-13, epsrel=1e-12):
    """Compare ``int phi_k(x - a; s) phi_k(x - b; r) dx`` with ``phi_k(b - a; s + r)``.

    The integrand is a product over coordinates, so the k-dimensional
    integral is evaluated as a product of adaptive one-dimensional
    integrals.

    Returns
    -------
    (analytic, quadrature) : tuple of float
    """
    if not (s > 0 and r > 0):
        raise ValueError("variances must be positive")
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if k is None:
        k = a.size
    a = np.broadcast_to(a, (k,))
    b = np.broadcast_to(b, (k,))
    analytic = float(phi(b - a, s + r, k=k)) if k > 1 else float(phi1(b[0] - a[0], s + r))
    quad = 1.0
    for ai, bi in zip(a, b):
        # the mass sits between the two centres; tell quad where to look
        centre = (ai * r + bi * s) / (s + r)
        width = 12.0 * np.sqrt(s * r / (s + r)) + 1.0
        val, _ = integrate.quad(
            lambda x: phi1(x - ai, s) * phi1(x - bi, r),
            centre - width, centre + width,
            points=[ai, bi] if abs(ai - centre) < width and abs(bi - centre) < width else None,
            epsabs=epsabs, epsrel=epsrel, limit=200,
        )
        quad *= val
    return analytic, quad


# --------------------------------------------------------------------------
# g_alpha convolution powers
# --------------------------------------------------------------------------

def g_alpha(t, alpha):
    """``t^(alpha/2 - 1)``."""
    return np.asarray(t, dtype=float) ** (0.5 * alpha - 1.0)


def g_alpha_power(n, alpha, t):
    """Closed form of the n-fold convolution power of ``g_alpha``.

    ``g^{*n}(t) = t^(n alpha/2 - 1) Gamma(alpha/2)^n / Gamma(n alpha/2)``.
    """
    if int(n) != n or n < 1:
        raise ValueError("n must be a positive integer")
    if not 0.0 < alpha < 2.0:
        raise ValueError("alpha must lie in (0, 2)")
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("t must be positive")
    h = 0.5 * alpha
    logc = n * special.gammaln(h) - special.gammaln(n * h)
    return t ** (n * h - 1.0) * np.exp(logc)


@lru_cache(maxsize=8)
def _gl(nodes):
    return np.polynomial.legendre.leggauss(nodes)


def _half_nodes(alpha, nodes):
    # substitution u = (1/2) w^(2/alpha) on w in [0, 1]: turns the endpoint
    # factor u^(k alpha/2 - 1) du into a polynomial in w
    x, w = _gl(nodes)
    v = 0.5 * (x + 1.0)
    p = 2.0 / alpha
    u = 0.5 * v ** p
    jac = 0.5 * p * v ** (p - 1.0) * 0.5 * w
    return u, jac


def g_alpha_power_numeric(n, alpha, t, nodes=24):
    """Iterated numerical convolution ``g * g * ... * g`` (n factors) at t.

    Each convolution ``int_0^t f(t - s) g(s) ds`` is split at t/2 and both
    halves use the power substitution ``s = (t/2) w^(2/alpha)``, which
    removes the algebraic endpoint singularities of the whole family.
    Cost grows like ``(2 nodes)^(n-1)``.
    """
    if n < 1:
        raise ValueError("n must be a positive integer")
    t = np.asarray(t, dtype=float)
    if n == 1:
        return g_alpha(t, alpha)
    u, jac = _half_nodes(alpha, nodes)
    tt = t[..., None]
    s = tt * u
    wts = tt * jac
    # left half: singular g(s), smooth g^{*(n-1)}(t - s)
    left = np.sum(g_alpha_power_numeric(n - 1, alpha, tt - s, nodes) * g_alpha(s, alpha) * wts, axis=-1)
    # right half: tau = t - s near 0 carries the singular factor
    right = np.sum(g_alpha_power_numeric(n - 1, alpha, s, nodes) * g_alpha(tt - s, alpha) * wts, axis=-1)
    return left + right


def g_alpha_recursion_numeric(n, alpha, t, nodes=48):
    """``int_0^t g^{*n}(t - s) g(s) ds`` with the closed form inside."""
    t = np.asarray(t, dtype=float)
    u, jac = _half_nodes(alpha, nodes)
    tt = t[..., None]
    s = tt * u
    wts = tt * jac
    left = np.sum(g_alpha_power(n, alpha, tt - s) * g_alpha(s, alpha) * wts, axis=-1)
    right = np.sum(g_alpha_power(n, alpha, s) * g_alpha(tt - s, alpha) * wts, axis=-1)
    return left + right


# --------------------------------------------------------------------------
# contraction bound
# --------------------------------------------------------------------------

def _check_bound_args(alpha, C_T, M_box, T, d):
    if not 0.0 < alpha < 2.0:
        raise ValueError("alpha must lie in (0, 2)")
    if not (C_T > 0 and M_box > 0 and T > 0 and d >= 1):
        raise ValueError("C_T, M_box, T and d must be positive")


def log_contraction_bound(n, alpha, C_T, M_box, T, d=1):
    """Natural log of the contraction bound ``b_n`` (vectorised over n)."""
    _check_bound_args(alpha, C_T, M_box, T, d)
    n = np.asarray(n, dtype=float)
    if np.any(n < 1):
        raise ValueError("n must be >= 1")
    h = 0.5 * alpha
    return (n * np.log(0.5 * C_T) + 0.5 * d * np.log(2.0 * M_box)
            + (n * h + 1.0) * np.log(T) + n * special.gammaln(h) - special.gammaln(n * h))


def contraction_bound(n, alpha, C_T, M_box, T, d=1):
    """``b_n = (C_T/2)^n (2M)^(d/2) T^(n alpha/2 + 1) Gamma(alpha/2)^n / Gamma(n alpha/2)``.

    Evaluated in log space so that large n neither overflows nor underflows
    prematurely.
    """
    return np.exp(log_contraction_bound(n, alpha, C_T, M_box, T, d))


def contraction_bound_direct(n, alpha, C_T, M_box, T, d=1):
    """Direct (non-log) evaluation; may overflow for large n."""
    _check_bound_args(alpha, C_T, M_box, T, d)
    h = 0.5 * alpha
    with np.errstate(over="ignore", invalid="ignore"):
        return ((0.5 * C_T) ** n * (2.0 * M_box) ** (0.5 * d) * T ** (n * h + 1.0)
                * special.gamma(h) ** n / special.gamma(n * h))


def first_n_below(tol, alpha, C_T, M_box, T, d=1, n_max=100000):
    """Smallest n with ``b_n < tol`` and ``b_k`` decreasing for all k >= n.

    Returns None when no such n exists up to ``n_max``.
    """
    n = np.arange(1, n_max + 1)
    lb = log_contraction_bound(n, alpha, C_T, M_box, T, d)
    below = lb < np.log(tol)
    dec = np.append(np.diff(lb) < 0, True)
    # suffix condition: from n on the sequence stays below tol and decreasing
    ok = below & dec
    tail = np.logical_and.accumulate(ok[::-1])[::-1]
    idx = np.flatnonzero(tail)
    return int(n[idx[0]]) if idx.size else None


# --------------------------------------------------------------------------
# mollifier
# --------------------------------------------------------------------------

def _raw_bump(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    ui = u[inside]
    out[inside] = np.exp(-1.0 / (1.0 - ui * ui))
    return out


@lru_cache(maxsize=1)
def bump_constant():
    """``a = 1 / int_{-1}^{1} exp(-1/(1 - u^2)) du`` (about 2.2523)."""
    half, _ = integrate.quad(lambda u: np.exp(-1.0 / (1.0 - u * u)), 0.0, 1.0,
                             epsabs=1e-14, epsrel=1e-12, limit=200)
    return 0.5 / half


@dataclass(frozen=True)
class Profile:
    """Smooth compactly supported profile ``v^degree * (a/eps) chi0(v)``.

    Here ``v = (u - center)/eps`` and ``chi0(v) = exp(-1/(1 - v^2))`` on
    ``|v| < 1``. With ``degree == 0`` the profile has unit mass.
    """

    center: float
    eps: float
    degree: int = 0
    scale: float = 1.0

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("width must be positive")
        if self.degree < 0:
            raise ValueError("degree must be non-negative")

    @property
    def support(self):
        return (self.center - self.eps, self.center + self.eps)

    def _parts(self, u):
        u = np.asarray(u, dtype=float)
        v = (u - self.center) / self.eps
        q = 1.0 - v * v
        inside = q > 0
        qs = np.where(inside, q, 1.0)
        e = np.where(inside, np.exp(-1.0 / qs), 0.0)
        return v, qs, e, inside

    def _poly(self, v):
        k = self.degree
        p0 = v ** k
        p1 = k * v ** (k - 1) if k >= 1 else np.zeros_like(v)
        p2 = k * (k - 1) * v ** (k - 2) if k >= 2 else np.zeros_like(v)
        return p0, p1, p2

    def _amp(self):
        return self.scale * bump_constant() / self.eps

    def __call__(self, u):
        v, q, e, _ = self._parts(u)
        return self._amp() * self._poly(v)[0] * e

    def d1(self, u):
        v, q, e, inside = self._parts(u)
        p0, p1, _ = self._poly(v)
        de = np.where(inside, e * (-2.0 * v / q ** 2), 0.0)
        return self._amp() * (p1 * e + p0 * de) / self.eps

    def d2(self, u):
        v, q, e, inside = self._parts(u)
        p0, p1, p2 = self._poly(v)
        de = np.where(inside, e * (-2.0 * v / q ** 2), 0.0)
        dde = np.where(inside, e * (4.0 * v * v / q ** 4 - 2.0 / q ** 2 - 8.0 * v * v / q ** 3), 0.0)
        return self._amp() * (p2 * e + 2.0 * p1 * de + p0 * dde) / self.eps ** 2


def mollifier(epsilon, center=0.0):
    """``chi_eps(m) = (1/eps) chi((m - center)/eps)`` with unit mass."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return Profile(center=float(center), eps=float(epsilon))
