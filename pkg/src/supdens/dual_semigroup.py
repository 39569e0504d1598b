"""Kernel of the dual (Feynman-Kac) semigroup.

``Q_t f(x) = E[f(Y^x_t) exp(-int_0^t div B(Y^x_u) du)]`` with
``dY = -B(Y) dt + dW`` has a kernel ``Gamma(x, y; t)`` with
``Q_t f(x) = int f(y) Gamma(x, y; t) dy``. It splits as ``Gamma0 + Gamma1``
where ``Gamma0`` is the heat kernel. For zero or constant drift the kernel
is Gaussian in closed form; otherwise it is estimated by Monte Carlo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, signal

from .kernels import KernelEstimateParams, Profile, phi
from .mc_engine import feynman_kac
from .model_core import ConfigurationError, ModelSpec

__all__ = [
    "KernelEval",
    "KernelModeError",
    "LowStatisticsError",
    "CellEstimate",
    "gamma0",
    "gamma_exact",
    "gamma_mc",
    "gamma_envelope_check",
    "d_gamma_dx1",
    "chapman_kolmogorov_check",
    "semigroup_apply",
    "ball_solution",
    "ball_weak_residual",
    "ball_refinement_study",
    "write_kernel_csv",
]

MODES = ("exact_zero_drift", "exact_constant_drift", "mc_estimate")


class KernelModeError(ConfigurationError):
    """Operation not available for the model's drift."""


class LowStatisticsError(RuntimeError):
    """Too few Monte Carlo hits for a usable estimate."""


def _pts(x, d):
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    return x


@dataclass(frozen=True, eq=False)
class KernelEval:
    """Kernel evaluator bound to a model.

    ``mode`` defaults to the exact mode matching the drift kind and to
    ``mc_estimate`` for general drift.
    """

    model: ModelSpec
    mode: str = None
    params: KernelEstimateParams = field(default_factory=KernelEstimateParams)

    def __post_init__(self):
        kind = self.model.drift_kind
        auto = {"zero": "exact_zero_drift", "constant": "exact_constant_drift"}.get(kind, "mc_estimate")
        mode = self.mode or auto
        if mode not in MODES:
            raise ValueError(f"unknown kernel mode {mode!r}")
        if mode == "exact_zero_drift" and kind != "zero":
            raise KernelModeError("exact_zero_drift requires zero drift")
        if mode == "exact_constant_drift" and kind != "constant":
            raise KernelModeError("exact_constant_drift requires constant drift")
        object.__setattr__(self, "mode", mode)

    @property
    def exact(self):
        return self.mode != "mc_estimate"

    def gamma(self, x, y, t):
        if not self.exact:
            raise KernelModeError("pointwise kernel values need an exact mode; use gamma_mc")
        return gamma_exact(x, y, t, self.model)[0]

    def d_gamma_dx1(self, x, y, t):
        return d_gamma_dx1(x, y, t, self.model)


# --------------------------------------------------------------------------
# exact kernels
# --------------------------------------------------------------------------

def gamma0(x, y, t, d=None):
    """Heat kernel ``phi_d(x - y; t)``; coordinates on the last axis."""
    if not np.all(np.asarray(t) > 0):
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if d == 1 or (x.ndim == 0 and y.ndim == 0):
        return phi(x - y, t, 1)
    return phi(x - y, t)


def _mu(model):
    if model.drift_kind not in ("zero", "constant"):
        raise KernelModeError("closed-form kernel needs zero or constant drift; use gamma_mc")
    return np.asarray(model.mu, dtype=float)


def gamma_exact(x, y, t, model: ModelSpec):
    """``(Gamma, Gamma1)`` for zero or constant drift.

    Y^x = x - mu t + W_t and div B = 0, so ``Gamma(x, y; t) = phi_d(y - x + mu t; t)``.
    """
    mu = _mu(model)
    d = model.d
    x = _pts(x, d)
    y = _pts(y, d)
    g0 = phi(x - y, t)
    if model.drift_kind == "zero":
        return g0, np.zeros_like(g0)
    g = phi(y - x + mu * t, t)
    return g, g - g0


def d_gamma_dx1(x, y, t, model: ModelSpec, h=None, n_paths=200_000, seed=0, min_hits=400):
    """``d Gamma / d x^1`` at ``(x, y; t)``.

    Analytic for zero and constant drift. For general drift a central
    difference of cell-averaged Monte Carlo kernels with step h (one cell
    width); returns ``(value, {'first_order': True, ...})`` in that case.
    """
    d = model.d
    if model.drift_kind in ("zero", "constant"):
        mu = _mu(model)
        x = _pts(x, d)
        y = _pts(y, d)
        z = y - x + mu * t
        return z[..., 0] / t * phi(z, t)
    h = h if h is not None else 0.1 * math.sqrt(t)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    cell = (y - 0.5 * h, y + 0.5 * h)
    e = np.zeros(d)
    e[0] = h
    up = gamma_mc(x + e, cell, t, model, n_paths, seed)
    dn = gamma_mc(x - e, cell, t, model, n_paths, seed)
    if up.hits < min_hits or dn.hits < min_hits:
        raise LowStatisticsError(f"only {min(up.hits, dn.hits)} hits in the derivative cell")
    val = (up.value - dn.value) / (2.0 * h)
    err = math.hypot(up.stderr, dn.stderr) / (2.0 * h)
    return val, {"first_order": True, "h": h, "stderr": err}


def chapman_kolmogorov_check(x, y, s, r, model: ModelSpec):
    """``(int Gamma(x, z; s) Gamma(z, y; r) dz, Gamma(x, y; s + r))`` for d = 1."""
    if model.d != 1:
        raise ConfigurationError("quadrature check implemented for d = 1")
    mu = float(_mu(model)[0])

    def f(z):
        return float(gamma_exact(x, z, s, model)[0]) * float(gamma_exact(z, y, r, model)[0])

    c = 0.5 * (x + y) - mu * s
    w = 12.0 * math.sqrt(s + r)
    val, _ = integrate.quad(f, c - w, c + w, epsabs=1e-14, epsrel=1e-12, limit=400,
                            points=[x - mu * s, y + mu * r])
    return val, float(gamma_exact(x, y, s + r, model)[0])


# --------------------------------------------------------------------------
# Monte Carlo kernel
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CellEstimate:
    """Cell-averaged kernel estimate."""

    value: float
    stderr: float
    hits: int
    low_statistics: bool


def gamma_mc(x, cell, t, model: ModelSpec, n_paths, seed=0, n_steps=200, threads=1):
    """Cell average of ``Gamma(x, . ; t)`` by weighted hit frequency.

    Parameters
    ----------
    cell : (lo, hi)
        Corners of a box in R^d with positive volume.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    lo = np.atleast_1d(np.asarray(cell[0], dtype=float))
    hi = np.atleast_1d(np.asarray(cell[1], dtype=float))
    vol = float(np.prod(hi - lo))
    if not vol > 0:
        raise ValueError("cell must have positive volume")
    hits = {}

    def indicator(y):
        inside = np.all((y >= lo) & (y < hi), axis=1)
        hits["n"] = int(inside.sum())
        return inside.astype(float)

    mean, se = feynman_kac(model, indicator, x, t, n_paths, seed=seed, n_steps=n_steps, threads=threads,
                           return_stderr=True)
    n = hits["n"]
    if n == 0:
        return CellEstimate(0.0, float("inf"), 0, True)
    return CellEstimate(mean / vol, se / vol, n, n < 100)


# --------------------------------------------------------------------------
# envelope fit
# --------------------------------------------------------------------------

def gamma_envelope_check(x, y, t, model: ModelSpec, params: KernelEstimateParams = None, derivative=False):
    """Fit the smallest C in ``|Gamma1| <= C t^(-d/2 + alpha/2) exp(-|x - y|^2 / (c t))``.

    With ``derivative`` the bound is
    ``|d_{x^1} Gamma1| <= C t^(-(d+1)/2 + alpha/2) exp(-|x - y|^2 / (c t))``.
    x and y are broadcast against each other (coordinates on the last axis
    for d > 1); t is a 1-D array of times.

    Returns
    -------
    dict
        ``C`` (fitted), ``profile`` (max ratio per t), ``violations`` (count
        after the fit, zero by construction) and the sample size.
    """
    params = params or KernelEstimateParams()
    d = model.d
    mu = _mu(model)
    diff = _pts(x, d) - _pts(y, d)
    r2 = np.sum(diff * diff, axis=-1)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    tt = t.reshape((-1,) + (1,) * r2.ndim)
    ttd = tt[..., None]
    z = -diff + mu * ttd
    z0 = np.broadcast_to(-diff, z.shape)
    if derivative:
        target = np.abs(z[..., 0] / tt * phi(z, tt) - z0[..., 0] / tt * phi(z0, tt))
        power = -(d + 1) / 2 + params.alpha / 2
    else:
        target = np.abs(phi(z, tt) - phi(z0, tt))
        power = -d / 2 + params.alpha / 2
    env = tt ** power * np.exp(-r2 / (params.c * tt))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(env > 0, target / env, np.where(target > 0, np.inf, 0.0))
    C = float(np.max(ratio))
    prof = ratio.reshape(t.size, -1).max(axis=1)
    violations = int(np.sum(target > C * env * (1 + 1e-12)))
    return {"C": C, "profile": prof.tolist(), "t": t.tolist(), "violations": violations,
            "n_samples": int(target.size), "alpha": params.alpha, "c": params.c, "derivative": derivative}


# --------------------------------------------------------------------------
# semigroup utilities and the mild-solution consistency check
# --------------------------------------------------------------------------

def semigroup_apply(model: ModelSpec, f, x, t, n_nodes=64):
    """``Q_t f(x)`` for constant drift (d = 1) by Gauss-Hermite quadrature."""
    mu = float(_mu(model)[0])
    z, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    w = w / w.sum()
    x = np.asarray(x, dtype=float)
    return np.tensordot(f(x[..., None] - mu * t + math.sqrt(t) * z), w, axes=([-1], [0]))


def _apply_kernel(rows, xs, tau, mu):
    """Trapezoid approximation of ``int Gamma(x_i, y; tau) g(y) dy`` on the
    uniform nodes xs for each row g of ``rows`` (FFT correlation)."""
    n = xs.size
    h = xs[1] - xs[0]
    lag = h * np.arange(-(n - 1), n)
    c = h * np.exp(-0.5 * (lag + mu * tau) ** 2 / tau) / math.sqrt(2.0 * math.pi * tau)
    out = signal.fftconvolve(np.atleast_2d(rows), c[None, ::-1], mode="full", axes=1)
    return out[:, n - 1:2 * n - 1]


def ball_solution(model: ModelSpec, u0, source, t, n_steps, xs):
    """``u(t_n) = Q_{t_n} u0 + int_0^{t_n} Q_{t_n - s} f(s) ds`` on the nodes xs.

    Spatial integrals by the trapezoidal rule on xs (spectrally accurate for
    smooth compactly supported data), time integral by the trapezoidal
    rule on ``n_steps`` equal steps. Returns ``(times, u)`` with u of shape
    ``(n_steps + 1, xs.size)``.
    """
    mu = float(_mu(model)[0])
    xs = np.asarray(xs, dtype=float)
    dt = t / n_steps
    times = dt * np.arange(n_steps + 1)
    f = np.stack([source(s, xs) for s in times])
    u = np.zeros((n_steps + 1, xs.size))
    u[0] = u0(xs)
    # Q_0 is the identity: the end point s = t_n contributes f(t_n) / 2
    u[1:] += 0.5 * dt * f[1:]
    for lag in range(1, n_steps + 1):
        rows = np.vstack([u[0], f[:n_steps + 1 - lag]])
        q = _apply_kernel(rows, xs, lag * dt, mu)
        u[lag] += q[0]
        w = np.full(n_steps + 1 - lag, dt)
        w[0] = 0.5 * dt
        u[lag:] += w[:, None] * q[1:]
    return times, u


def ball_weak_residual(model: ModelSpec, u0, source, F: Profile, t, n_steps, xs):
    """Weak-form residual of ``u' = L* u + f`` against F at time t.

    ``int F u(t) - int F u0 - int_0^t int u L F ds - int_0^t int F f ds``,
    ``L F = B F' + F''/2``.
    """
    times, u = ball_solution(model, u0, source, t, n_steps, xs)
    xs = np.asarray(xs, dtype=float)
    h = xs[1] - xs[0]
    b = model.drift(xs)
    LF = b * F.d1(xs) + 0.5 * F.d2(xs)
    Fv = F(xs)
    f = np.stack([source(s, xs) for s in times])
    wt = np.full(times.size, t / n_steps)
    wt[0] *= 0.5
    wt[-1] *= 0.5
    lhs = h * np.sum(Fv * u[-1])
    init = h * np.sum(Fv * u[0])
    gen = np.sum(wt * (h * (u @ LF)))
    src = np.sum(wt * (h * (f @ Fv)))
    return float(lhs - init - gen - src)


def ball_refinement_study(model: ModelSpec, u0, source, F: Profile, t, steps=(8, 16, 32, 64), xs=None):
    """Residuals and observed orders under dyadic refinement in time."""
    if xs is None:
        xs = np.linspace(-8.0, 8.0, 801)
    res = np.array([ball_weak_residual(model, u0, source, F, t, n, xs) for n in steps])
    orders = np.log2(np.abs(res[:-1]) / np.abs(res[1:]))
    return {"steps": list(steps), "residuals": res.tolist(), "orders": orders.tolist()}


def write_kernel_csv(model: ModelSpec, x, ys, times, path):
    """Export ``Gamma``, ``Gamma0`` and ``Gamma1`` on slices (d = 1, exact modes).

    Columns ``t, x1, y1, gamma, gamma0, gamma1`` with 17 significant digits.
    """
    if model.d != 1:
        raise ConfigurationError("kernel export implemented for d = 1")
    ys = np.asarray(ys, dtype=float)
    rows = ["t,x1,y1,gamma,gamma0,gamma1"]
    for t in np.atleast_1d(times):
        g, g1 = gamma_exact(float(x), ys, float(t), model)
        g0 = g - g1
        for y, a, b, c in zip(ys, g, g0, g1):
            rows.append(",".join("%.17g" % v for v in (t, x, y, a, b, c)))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")
