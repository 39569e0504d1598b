"""Problem definition shared by all solvers.

A model is the SDE ``dX = B(X) dt + dW`` in R^d started from a density f0,
together with the running supremum ``M_t = sup_{s<=t} X_s^1``. The joint
law of ``(M_t, X_t)`` lives on the triangular domain ``{m >= x^1}``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, special

from .kernels import Profile

__all__ = [
    "ConfigurationError",
    "ValidationError",
    "ModelSpec",
    "TriangularGrid",
    "JointDensityGrid",
    "TestFunction",
    "build_model",
    "make_test_function",
    "envelope_half_width",
    "default_grid",
]

DRIFT_KINDS = ("zero", "constant", "general")
PROVENANCES = ("exact", "parametrix", "monte_carlo")


class ConfigurationError(ValueError):
    """Invalid model or run description."""


class ValidationError(ValueError):
    """A constructed object violates one of its invariants."""


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

def _as_points(x, d):
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        return x[..., None]
    if x.shape[-1] != d:
        raise ValueError(f"points must have {d} coordinates on the last axis")
    return x


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Drift, initial law and dimension of ``dX = B(X) dt + dW``.

    Attributes
    ----------
    d : int
        Dimension of X.
    drift_fn : callable
        ``(..., d) -> (..., d)``.
    partials_fn : callable
        ``(..., d) -> (..., d)``, the diagonal partials ``dB^k/dx^k``.
    drift_bound, divergence_bound : float
        Upper bounds of ``|B|`` and ``|div B|`` (verified on samples).
    f0_mean : ndarray
        Mean of the initial law.
    f0_width : float
        Standard deviation of the (isotropic Gaussian) initial law.
    drift_kind : {'zero', 'constant', 'general'}
    mu : ndarray or None
        The constant drift vector when ``drift_kind`` is zero or constant.
    numeric_derivative : bool
        True when ``partials_fn`` uses central differences.
    descriptor : dict
        JSON-serialisable description used for manifests and hashing.
    """

    d: int
    drift_fn: Callable
    partials_fn: Callable
    drift_bound: float
    divergence_bound: float
    f0_mean: np.ndarray
    f0_width: float
    f0_l1: float
    f0_l2: float
    drift_kind: str
    mu: Optional[np.ndarray]
    numeric_derivative: bool
    descriptor: dict = field(default_factory=dict)
    f0_fn: Optional[Callable] = None

    # -- drift -------------------------------------------------------------
    def drift(self, x):
        """B(x); for d = 1 a plain array of positions is accepted."""
        x = np.asarray(x, dtype=float)
        plain = self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1)
        pts = x[..., None] if plain else x
        out = np.broadcast_to(np.asarray(self.drift_fn(pts), dtype=float), pts.shape)
        return out[..., 0] if plain else out

    def drift1(self, x):
        """First drift component as a function of the full point."""
        pts = _as_points(x, self.d)
        out = np.broadcast_to(np.asarray(self.drift_fn(pts), dtype=float), pts.shape)
        return out[..., 0]

    def divergence(self, x):
        pts = _as_points(x, self.d)
        out = np.broadcast_to(np.asarray(self.partials_fn(pts), dtype=float), pts.shape)
        return out.sum(axis=-1)

    # -- initial law -------------------------------------------------------
    def f0(self, x):
        pts = _as_points(x, self.d)
        if self.f0_fn is not None:
            return self.f0_fn(pts)
        z = (pts - self.f0_mean) / self.f0_width
        return np.exp(-0.5 * np.sum(z * z, axis=-1)) / (np.sqrt(2 * np.pi) * self.f0_width) ** self.d

    def f0_nodes(self, n=1):
        """Quadrature nodes and weights for mixtures over the initial law.

        Gauss-Hermite (tensorised) for the Gaussian initial law. ``n = 1``
        collapses the law to its mean.
        """
        if self.f0_fn is not None:
            raise ConfigurationError("mixture nodes are only available for Gaussian initial laws")
        x, w = np.polynomial.hermite_e.hermegauss(n)
        w = w / w.sum()
        grids = np.meshgrid(*([x] * self.d), indexing="ij")
        wgrid = np.ones_like(grids[0])
        for k in range(self.d):
            wgrid = wgrid * np.meshgrid(*([w] * self.d), indexing="ij")[k]
        pts = np.stack([g.ravel() for g in grids], axis=-1) * self.f0_width + self.f0_mean
        return pts, wgrid.ravel()

    @property
    def x0(self):
        """Start point used by point-mass oracles (the mean of f0)."""
        return np.asarray(self.f0_mean, dtype=float)

    @property
    def label(self):
        return self.descriptor.get("label", self.drift_kind)

    def hash(self):
        blob = json.dumps(self.descriptor, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _sample_points(d, half_width, n_per_axis):
    ax = np.linspace(-half_width, half_width, n_per_axis)
    grids = np.meshgrid(*([ax] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def _fd_partials(fn, d):
    def partials(x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape)
        for k in range(d):
            h = 1e-5 * (1.0 + np.abs(x[..., k]))
            xp = x.copy()
            xm = x.copy()
            xp[..., k] += h
            xm[..., k] -= h
            bp = np.broadcast_to(fn(xp), x.shape)[..., k]
            bm = np.broadcast_to(fn(xm), x.shape)[..., k]
            out[..., k] = (bp - bm) / (2.0 * h)
        return out
    return partials


def _sympy_drift(exprs, d):
    import sympy as sp

    syms = sp.symbols(" ".join(f"x{k + 1}" for k in range(d)))
    syms = (syms,) if d == 1 else tuple(syms)
    if isinstance(exprs, str):
        exprs = [exprs]
    if len(exprs) != d:
        raise ConfigurationError(f"drift expression needs {d} components, got {len(exprs)}")
    local = {s.name: s for s in syms}
    parsed = [sp.sympify(e, locals=local) for e in exprs]
    extra = set().union(*(p.free_symbols for p in parsed)) - set(syms)
    if extra:
        raise ConfigurationError(f"drift expression uses unknown symbols {sorted(map(str, extra))}")
    comps = [sp.lambdify(syms, p, "numpy") for p in parsed]
    parts = [sp.lambdify(syms, sp.diff(p, syms[k]), "numpy") for k, p in enumerate(parsed)]

    def fn(x):
        cols = [x[..., k] for k in range(d)]
        return np.stack([np.broadcast_to(np.asarray(c(*cols), dtype=float), x.shape[:-1]) for c in comps], axis=-1)

    def pfn(x):
        cols = [x[..., k] for k in range(d)]
        return np.stack([np.broadcast_to(np.asarray(c(*cols), dtype=float), x.shape[:-1]) for c in parts], axis=-1)

    return fn, pfn


def _resolve_drift(desc, d):
    """Return (fn, partials, numeric_flag, known_bounds, mu, canonical descriptor)."""
    if callable(desc):
        return desc, _fd_partials(desc, d), True, None, None, {"kind": "callable", "name": getattr(desc, "__name__", "?")}
    if isinstance(desc, (tuple, list)) and len(desc) == 2 and all(callable(c) for c in desc):
        fn, pfn = desc
        return fn, pfn, False, None, None, {"kind": "callable", "name": getattr(fn, "__name__", "?")}
    if isinstance(desc, str):
        desc = {"kind": "expression", "expr": desc}
    if not isinstance(desc, dict) or "kind" not in desc:
        raise ConfigurationError("drift descriptor must be a mapping with a 'kind' key")
    kind = desc["kind"]
    if kind == "zero":
        mu = np.zeros(d)
        return (lambda x: np.zeros(np.shape(x)), lambda x: np.zeros(np.shape(x)), False,
                (0.0, 0.0), mu, {"kind": "zero"})
    if kind == "constant":
        mu = np.broadcast_to(np.asarray(desc.get("mu", 0.0), dtype=float), (d,)).copy()
        return (lambda x: np.broadcast_to(mu, np.shape(x)).copy(), lambda x: np.zeros(np.shape(x)),
                False, (float(np.linalg.norm(mu)), 0.0), mu, {"kind": "constant", "mu": mu.tolist()})
    if kind == "tanh":
        a = float(desc.get("scale", 1.0))
        return (lambda x: a * np.tanh(x), lambda x: a / np.cosh(x) ** 2, False,
                (abs(a) * np.sqrt(d), abs(a) * d), None, {"kind": "tanh", "scale": a})
    if kind == "expression":
        fn, pfn = _sympy_drift(desc["expr"], d)
        return fn, pfn, False, None, None, {"kind": "expression", "expr": desc["expr"]}
    raise ConfigurationError(f"unknown drift kind {kind!r}")


def _resolve_f0(desc, d):
    if desc is None:
        desc = {"kind": "gaussian"}
    if isinstance(desc, (int, float)):
        desc = {"kind": "point", "mean": desc}
    kind = desc.get("kind", "gaussian")
    mean = np.broadcast_to(np.asarray(desc.get("mean", 0.0), dtype=float), (d,)).copy()
    if kind == "point":
        width = float(desc.get("width", 1e-3))
    elif kind == "gaussian":
        width = float(desc.get("width", 1e-3))
    else:
        raise ConfigurationError(f"unknown initial-law kind {kind!r}")
    if not (np.isfinite(width) and width > 0) or not np.all(np.isfinite(mean)):
        raise ConfigurationError("initial law is not normalisable: width must be finite and positive")
    return mean, width, {"kind": kind, "mean": mean.tolist(), "width": width}


def build_model(drift_expr=None, f0_descriptor=None, d=1, label=None, sample_half_width=20.0):
    """Validate a drift and initial-law description and return a ModelSpec.

    Parameters
    ----------
    drift_expr : dict, str, callable or (callable, callable)
        ``{'kind': 'zero'}``, ``{'kind': 'constant', 'mu': 0.5}``,
        ``{'kind': 'tanh', 'scale': 1}``, ``{'kind': 'expression', 'expr':
        'tanh(x1)'}``, a sympy-parsable string, a vectorised callable
        (derivatives then by central differences, flagged), or a pair
        ``(drift, partials)``.
    f0_descriptor : dict or float
        ``{'kind': 'gaussian', 'mean': m, 'width': w}``; ``'point'`` is a
        Gaussian of default width 1e-3 standing in for a point mass.
    d : int
        Dimension.

    Raises
    ------
    ConfigurationError
        Unknown kinds or a non-normalisable initial law.
    ValidationError
        Non-finite or unbounded drift samples; the offending point is named.
    """
    if int(d) != d or d < 1:
        raise ConfigurationError("dimension must be a positive integer")
    d = int(d)
    if drift_expr is None:
        drift_expr = {"kind": "zero"}
    fn, pfn, numeric, known, mu, ddesc = _resolve_drift(drift_expr, d)
    mean, width, fdesc = _resolve_f0(f0_descriptor, d)

    n_axis = {1: 8001, 2: 401, 3: 61}.get(d, 21)
    pts = _sample_points(d, sample_half_width, n_axis)
    with np.errstate(all="ignore"):
        b = np.broadcast_to(np.asarray(fn(pts), dtype=float), pts.shape)
        dv = np.broadcast_to(np.asarray(pfn(pts), dtype=float), pts.shape).sum(axis=-1)
    bad = ~np.all(np.isfinite(b), axis=-1) | ~np.isfinite(dv)
    if np.any(bad):
        raise ValidationError(f"drift is not finite at sample point {pts[np.argmax(bad)].tolist()}")
    bn = np.linalg.norm(b, axis=-1)
    inner = np.max(np.abs(pts), axis=-1) <= 0.5 * sample_half_width
    sup_in, sup_all = bn[inner].max(), bn.max()
    if sup_all > 1.5 * sup_in + 1e-9:
        raise ValidationError(
            f"drift appears unbounded: |B| = {sup_all:.6g} at sample point {pts[np.argmax(bn)].tolist()}")
    if known is not None:
        drift_bound, div_bound = known
        if sup_all > drift_bound * (1 + 1e-12) + 1e-300 or np.abs(dv).max() > div_bound * (1 + 1e-12) + 1e-300:
            raise ValidationError("declared drift bounds are violated on samples")
    else:
        drift_bound, div_bound = float(sup_all), float(np.abs(dv).max())

    if mu is None:
        if np.all(b == 0):
            mu = np.zeros(d)
        elif np.all(b == b[0]):
            mu = b[0].copy()
    if mu is not None and np.all(mu == 0):
        kind = "zero"
    elif mu is not None:
        kind = "constant"
    else:
        kind = "general"
    # the sampled law must agree with the declared kind
    if kind == "zero" and np.any(b != 0):
        raise ValidationError("zero drift kind but nonzero samples")
    if kind == "constant" and np.any(b != mu):
        raise ValidationError("constant drift kind but varying samples")

    l2 = (2.0 * np.sqrt(np.pi) * width) ** (-0.5 * d)
    desc = {"d": d, "drift": ddesc, "f0": fdesc, "label": label or ddesc["kind"],
            "numeric_derivative": numeric}
    return ModelSpec(d=d, drift_fn=fn, partials_fn=pfn, drift_bound=float(drift_bound),
                     divergence_bound=float(div_bound), f0_mean=mean, f0_width=width,
                     f0_l1=1.0, f0_l2=float(l2), drift_kind=kind, mu=mu,
                     numeric_derivative=numeric, descriptor=desc)


def envelope_half_width(model, T, tail=1e-8):
    """Half width L of a box ``x0 +- L`` outside which the Gaussian envelope
    puts less than ``tail`` mass on both M_T and X_T^1."""
    z = special.ndtri(1.0 - 0.25 * tail / model.d)
    return float(model.drift_bound * T + z * np.sqrt(T) + 6.0 * model.f0_width)


def envelope_tail_mass(model, T, L):
    """Gaussian-envelope mass outside ``x0 +- L`` (reported in manifests)."""
    z = max(L - model.drift_bound * T - 6.0 * model.f0_width, 0.0) / np.sqrt(T)
    return float(4.0 * model.d * special.ndtr(-z))


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TriangularGrid:
    """Uniform lattice on the truncation box with the diagonal on grid lines.

    ``x_nodes`` is the x^1 axis. ``m_nodes`` is the set of lattice points
    at or above ``m_lo``, so ``m_nodes[j] == x_nodes[j + m_offset]``.
    ``times`` holds the slices ``0 < t_1 < ... < t_K <= T``. For d > 1,
    ``xt_nodes`` holds the extra spatial axes.
    """

    x_nodes: np.ndarray
    m_offset: int
    times: np.ndarray
    T: float
    xt_nodes: tuple = ()

    def __post_init__(self):
        x = np.asarray(self.x_nodes, dtype=float)
        if x.ndim != 1 or x.size < 3:
            raise ValidationError("x axis needs at least three nodes")
        dx = np.diff(x)
        if np.any(dx <= 0):
            raise ValidationError("node spacing must be strictly positive")
        if np.max(np.abs(dx - dx.mean())) > 1e-9 * dx.mean():
            raise ValidationError("node spacing must be uniform")
        if not 0 <= self.m_offset < x.size:
            raise ValidationError("m axis offset out of range")
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 1 or t[0] <= 0 or np.any(np.diff(t) <= 0):
            raise ValidationError("time slices must be positive and strictly increasing")
        if t[-1] > self.T * (1 + 1e-12):
            raise ValidationError("last time slice exceeds the horizon")

    @classmethod
    def uniform(cls, lo, hi, n_cells, T, n_slices, m_lo=None, xt_cells=None, xt_box=None):
        """Box ``[lo, hi]`` split into ``n_cells`` intervals on both axes and
        ``n_slices`` equal time steps. ``m_lo`` (snapped to the lattice) is
        the lowest m row; rows below it carry no mass."""
        x = np.linspace(lo, hi, n_cells + 1)
        h = (hi - lo) / n_cells
        if m_lo is None:
            off = 0
        else:
            off = int(round((m_lo - lo) / h))
            if abs(lo + off * h - m_lo) > 1e-9 * max(h, 1.0):
                raise ValidationError("m_lo must be a lattice point")
        times = T * np.arange(1, n_slices + 1) / n_slices
        xt = ()
        if xt_cells is not None:
            a, b = xt_box
            xt = tuple(np.linspace(a, b, xt_cells + 1) for _ in range(1))
        return cls(x_nodes=x, m_offset=off, times=times, T=float(T), xt_nodes=xt)

    @property
    def h(self):
        return float(self.x_nodes[1] - self.x_nodes[0])

    @property
    def m_nodes(self):
        return self.x_nodes[self.m_offset:]

    @property
    def n_m(self):
        return self.x_nodes.size - self.m_offset

    @property
    def n_x(self):
        return self.x_nodes.size

    @property
    def dt(self):
        return float(self.times[0])

    @property
    def d(self):
        return 1 + len(self.xt_nodes)

    @property
    def box(self):
        return (float(self.x_nodes[0]), float(self.x_nodes[-1]))

    @property
    def mask(self):
        """Boolean (n_m, n_x) array selecting nodes with m >= x^1."""
        return self.m_nodes[:, None] >= self.x_nodes[None, :] - 1e-12 * self.h

    def remask(self, values):
        """Zero every node outside the triangle (idempotent)."""
        values = np.asarray(values)
        shape = (1,) * (values.ndim - 2 - len(self.xt_nodes)) + self.mask.shape + (1,) * len(self.xt_nodes)
        return np.where(self.mask.reshape(shape), values, 0.0)

    def diag_index(self, j):
        """x index of the diagonal node in m row j."""
        return j + self.m_offset

    def triangle_weights(self):
        """Quadrature weights on (n_m, n_x): per-row trapezoid along x^1 with
        half weight at the diagonal node, trapezoid along m."""
        h = self.h
        nm, nx, off = self.n_m, self.n_x, self.m_offset
        w = np.zeros((nm, nx))
        for j in range(nm):
            J = j + off
            if J == 0:
                continue
            w[j, : J + 1] = h
            w[j, 0] = 0.5 * h
            w[j, J] = 0.5 * h
        wm = np.full(nm, h)
        wm[0] = wm[-1] = 0.5 * h
        return w * wm[:, None]

    def xt_weights(self):
        out = []
        for ax in self.xt_nodes:
            w = np.full(ax.size, ax[1] - ax[0])
            w[0] *= 0.5
            w[-1] *= 0.5
            out.append(w)
        return out

    def describe(self):
        return {"x_lo": self.box[0], "x_hi": self.box[1], "n_x": self.n_x, "n_m": self.n_m,
                "m_offset": self.m_offset, "h": self.h, "n_slices": int(self.times.size),
                "T": self.T, "d": self.d,
                "xt": [[float(a[0]), float(a[-1]), int(a.size)] for a in self.xt_nodes]}

    def coarsen(self):
        """Every second node and every second slice (used for error estimates)."""
        if (self.n_x - 1) % 2 or self.times.size % 2 or self.m_offset % 2:
            raise ValidationError("grid cannot be coarsened by two")
        return TriangularGrid(x_nodes=self.x_nodes[::2], m_offset=self.m_offset // 2,
                              times=self.times[1::2], T=self.T,
                              xt_nodes=tuple(a[::2] for a in self.xt_nodes))


def default_grid(model, T, n_cells=128, n_slices=32, tail=1e-8, point_start=None):
    """Grid on ``x0 +- L`` (L from the Gaussian envelope) with the start on a
    lattice point; m rows start at x0 for a near-point start."""
    x0 = float(model.x0[0])
    L = envelope_half_width(model, T, tail)
    h = 2.0 * L / n_cells
    if point_start is None:
        point_start = model.f0_width < 0.05 * h or model.descriptor.get("f0", {}).get("kind") == "point"
    m_lo = x0 if point_start else None
    xt_cells = xt_box = None
    if model.d == 2:
        xt_cells = n_cells
        c = float(model.x0[1])
        xt_box = (c - L, c + L)
    return TriangularGrid.uniform(x0 - L, x0 + L, n_cells, T, n_slices, m_lo=m_lo,
                                  xt_cells=xt_cells, xt_box=xt_box)


@dataclass(frozen=True, eq=False)
class JointDensityGrid:
    """Values of p(m, x; t) on a TriangularGrid.

    ``values`` has shape ``(K, n_m, n_x)`` (d = 1) or ``(K, n_m, n_x, n_xt)``
    (d = 2) and is zero outside the triangle. ``diagonal`` has shape
    ``(K, n_m[, n_xt])`` and holds the trace ``p(m, m, x~; t)``.
    """

    grid: TriangularGrid
    values: np.ndarray
    provenance: str
    diagonal: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        v = np.asarray(self.values, dtype=float)
        g = self.grid
        expect = (g.times.size, g.n_m, g.n_x) + tuple(a.size for a in g.xt_nodes)
        if v.shape != expect:
            raise ValidationError(f"values shape {v.shape} does not match grid {expect}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("density values must be finite")
        if self.provenance != "parametrix" and np.any(v < 0):
            raise ValidationError("exact and Monte Carlo densities must be non-negative")
        v = g.remask(v)
        object.__setattr__(self, "values", v)
        if self.diagonal is None:
            object.__setattr__(self, "diagonal", self.extract_diagonal(v))

    def extract_diagonal(self, v=None):
        v = self.values if v is None else v
        g = self.grid
        j = np.arange(g.n_m)
        return v[:, j, j + g.m_offset]

    def mass(self, k=None):
        """Integral over the triangle per slice (or at slice k)."""
        w = self.grid.triangle_weights()
        v = self.values
        for wx in self.grid.xt_weights():
            v = np.tensordot(v, wx, axes=([-1], [0]))
        m = np.einsum("kji,ji->k", v, w)
        return m if k is None else float(m[k])

    def l1_distance(self, other, k=-1):
        """``int |p - q|`` over the triangle at slice k."""
        w = self.grid.triangle_weights()
        diff = np.abs(self.values[k] - np.asarray(other)[k] if not isinstance(other, JointDensityGrid)
                      else np.abs(self.values[k] - other.values[k]))
        for wx in self.grid.xt_weights():
            diff = np.tensordot(diff, wx, axes=([-1], [0]))
        return float(np.sum(diff * w))

    def with_values(self, values, provenance=None, meta=None):
        return JointDensityGrid(self.grid, values, provenance or self.provenance,
                                meta=dict(self.meta if meta is None else meta))


# --------------------------------------------------------------------------
# test functions
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TestFunction:
    """Separable ``Phi(m, x) = H(m) F(x)`` with ``F(x) = prod_k F_k(x^k)``.

    Spatial arguments are passed as a sequence of coordinate arrays
    ``[x1, x2, ...]``; for d = 1 a bare array is accepted.
    """

    __test__ = False  # not a pytest class

    H: Profile
    F: tuple
    kind: str
    ident: str = ""

    @property
    def d(self):
        return len(self.F)

    @property
    def radii(self):
        return (self.H.eps,) + tuple(f.eps for f in self.F)

    @property
    def support(self):
        return (self.H.support,) + tuple(f.support for f in self.F)

    def _xs(self, x):
        if self.d == 1 and not isinstance(x, (list, tuple)):
            return [np.asarray(x, dtype=float)]
        return [np.asarray(c, dtype=float) for c in x]

    def F_val(self, x):
        xs = self._xs(x)
        out = 1.0
        for f, c in zip(self.F, xs):
            out = out * f(c)
        return out

    def F_grad(self, x):
        xs = self._xs(x)
        vals = [f(c) for f, c in zip(self.F, xs)]
        grads = []
        for k, (f, c) in enumerate(zip(self.F, xs)):
            g = f.d1(c)
            for l, v in enumerate(vals):
                if l != k:
                    g = g * v
            grads.append(g)
        return grads

    def F_lap(self, x):
        xs = self._xs(x)
        vals = [f(c) for f, c in zip(self.F, xs)]
        out = 0.0
        for k, (f, c) in enumerate(zip(self.F, xs)):
            g = f.d2(c)
            for l, v in enumerate(vals):
                if l != k:
                    g = g * v
            out = out + g
        return out

    def __call__(self, m, x):
        return self.H(m) * self.F_val(x)

    def dm(self, m, x):
        return self.H.d1(m) * self.F_val(x)

    def grad_x(self, m, x):
        h = self.H(m)
        return [h * g for g in self.F_grad(x)]

    def lap_x(self, m, x):
        return self.H(m) * self.F_lap(x)

    def generator(self, model, m, x):
        """``L Phi = B . grad_x Phi + (1/2) lap_x Phi`` (no m derivatives)."""
        xs = self._xs(x)
        pts = np.stack(np.broadcast_arrays(*xs), axis=-1)
        b = np.broadcast_to(np.asarray(model.drift_fn(pts), dtype=float), pts.shape)
        grads = self.F_grad(xs)
        hm = self.H(m)
        adv = 0.0
        for k, g in enumerate(grads):
            adv = adv + b[..., k] * g
        return hm * (adv + 0.5 * self.F_lap(xs))


def make_test_function(kind, center, radius, degree=0, ident=None):
    """Build ``Phi = H(m) F(x)`` from scaled copies of the mollifier profile.

    Parameters
    ----------
    kind : {'bump', 'polynomial_times_bump'}
    center : sequence of float
        ``(m_c, x_c^1, ..., x_c^d)``.
    radius : float or sequence
        Support radius, shared or per coordinate.
    degree : int
        Monomial degree for ``polynomial_times_bump`` (applied to H and to
        the first spatial factor).
    """
    if kind not in ("bump", "polynomial_times_bump"):
        raise ValueError(f"unknown test-function kind {kind!r}")
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if center.size < 2:
        raise ValueError("center needs an m coordinate and at least one x coordinate")
    radius = np.broadcast_to(np.asarray(radius, dtype=float), center.shape)
    if np.any(radius <= 0):
        raise ValueError("radius must be positive")
    deg = int(degree) if kind == "polynomial_times_bump" else 0
    H = Profile(center=float(center[0]), eps=float(radius[0]), degree=deg)
    F = tuple(Profile(center=float(c), eps=float(r), degree=deg if k == 0 else 0)
              for k, (c, r) in enumerate(zip(center[1:], radius[1:])))
    if ident is None:
        ident = f"{kind}:{','.join(f'{c:g}' for c in center)}:{','.join(f'{r:g}' for r in radius)}:{deg}"
    return TestFunction(H=H, F=F, kind=kind, ident=ident)
