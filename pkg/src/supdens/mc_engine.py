"""Monte Carlo oracle for the joint law of ``(M_T, X_T)``.

Paths follow the Euler scheme ``X_{k+1} = X_k + B(X_k) dt + sqrt(dt) xi_k``.
With bridge correction the supremum over a step is drawn exactly from the
law of the Brownian-bridge maximum between the two Euler nodes.

Random numbers come from counter-based Philox streams keyed by
``(seed, block index)``. Paths are simulated in fixed-size blocks, so the
output is bit-identical for any number of worker threads.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model_core import JointDensityGrid, ModelSpec, TriangularGrid

__all__ = [
    "PathBatch",
    "SimulationError",
    "CoverageWarning",
    "simulate",
    "bridge_max_sample",
    "estimate_density",
    "cell_histogram",
    "feynman_kac",
    "save_batch",
    "load_batch",
    "BLOCK_SIZE",
    "PathSeries",
    "simulate_series",
    "estimate_density_series",
]

BLOCK_SIZE = 1 << 14
STEP_CHUNK = 64
MAX_EXCLUSION = 1e-3
_MAGIC = b"SDPB0001"
_HEADER = struct.Struct("<8sQQIdQ")  # magic, seed, n_paths, d, T, n_steps


class SimulationError(RuntimeError):
    """Too many paths left the finite range."""


class CoverageWarning(RuntimeWarning):
    """Samples fall outside the estimation grid."""


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Terminal states and suprema of a set of simulated paths.

    Attributes
    ----------
    terminal : ndarray, shape (n_paths, d)
        X_T for the retained paths.
    sup : ndarray, shape (n_paths,)
        M_T = running maximum of the first coordinate.
    weights : ndarray or None
        Feynman-Kac weights ``exp(-int div B)``; None when not requested.
    seed : int
        Root seed of the Philox streams; block b uses key (seed, b).
    n_steps : int
    T : float
    bridge : bool
        Whether the bridge-maximum correction was applied.
    n_excluded : int
        Paths dropped because the state became non-finite.
    """

    terminal: np.ndarray
    sup: np.ndarray
    weights: Optional[np.ndarray]
    seed: int
    n_steps: int
    T: float
    bridge: bool = True
    n_excluded: int = 0
    scheme: str = "philox-block"
    block_size: int = BLOCK_SIZE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.terminal, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "terminal", x)
        if self.sup.shape != (x.shape[0],):
            raise ValueError("sup and terminal disagree in path count")
        if self.weights is not None and np.any(self.weights <= 0):
            raise ValueError("Feynman-Kac weights must be positive")

    @property
    def n_paths(self):
        return int(self.sup.size)

    @property
    def d(self):
        return int(self.terminal.shape[1])

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def stream(self):
        return {"seed": int(self.seed), "scheme": self.scheme, "block_size": int(self.block_size)}


# --------------------------------------------------------------------------
# simulation
# --------------------------------------------------------------------------

def bridge_max_sample(x0, x1, dt, u):
    """Maximum of a Brownian bridge from x0 to x1 over a step dt, drawn by
    inverting ``P(max <= y) = 1 - exp(-2 (y - x0)(y - x1) / dt)``."""
    dx = x1 - x0
    return 0.5 * (x0 + x1 + np.sqrt(dx * dx - 2.0 * dt * np.log(u)))


def _block_generator(seed, block):
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(block)])
    return np.random.Generator(np.random.Philox(ss))


def _start_points(model, rng, n):
    d = model.d
    if model.descriptor.get("f0", {}).get("kind") == "point":
        return np.broadcast_to(model.f0_mean, (n, d)).copy()
    return model.f0_mean + model.f0_width * rng.standard_normal((n, d))


def _run_block(drift, divergence, x_start, T, n_steps, n, bridge, fk, seed, block, x0_fn):
    rng = _block_generator(seed, block)
    x = x0_fn(rng, n) if x_start is None else np.broadcast_to(np.asarray(x_start, float), (n, len(x_start))).copy()
    d = x.shape[1]
    dt = T / n_steps
    sq = math.sqrt(dt)
    m = x[:, 0].copy()
    logw = np.zeros(n) if fk else None
    alive = np.ones(n, dtype=bool)
    div_prev = divergence(x) if fk else None
    done = 0
    with np.errstate(all="ignore"):
        while done < n_steps:
            c = min(STEP_CHUNK, n_steps - done)
            xi = rng.standard_normal((c, n, d))
            u = rng.random((c, n)) if bridge else None
            for s in range(c):
                b = drift(x)
                xn = x + b * dt + sq * xi[s]
                if bridge:
                    # 1 - U lies in (0, 1], so the logarithm is finite
                    step_max = bridge_max_sample(x[:, 0], xn[:, 0], dt, 1.0 - u[s])
                else:
                    step_max = xn[:, 0]
                np.maximum(m, step_max, out=m)
                if fk:
                    div_new = divergence(xn)
                    logw -= 0.5 * dt * (div_prev + div_new)
                    div_prev = div_new
                x = xn
            done += c
            alive &= np.all(np.isfinite(x), axis=1) & np.isfinite(m)
    return x, m, (np.exp(logw) if fk else None), alive


def _simulate(model, T, n_steps, n_paths, bridge, seed, threads=1, drift_sign=1.0, fk=False, x_start=None):
    if n_steps < 1 or n_paths < 1:
        raise ValueError("n_steps and n_paths must be at least 1")
    if not T > 0:
        raise ValueError("T must be positive")

    def drift(x):
        return drift_sign * np.broadcast_to(np.asarray(model.drift_fn(x), dtype=float), x.shape)

    def divergence(x):
        return np.broadcast_to(np.asarray(model.partials_fn(x), dtype=float), x.shape).sum(axis=-1)

    def x0_fn(rng, n):
        return _start_points(model, rng, n)

    n_blocks = -(-n_paths // BLOCK_SIZE)
    sizes = [min(BLOCK_SIZE, n_paths - b * BLOCK_SIZE) for b in range(n_blocks)]
    args = [(drift, divergence, x_start, float(T), int(n_steps), sizes[b], bridge, fk, seed, b, x0_fn)
            for b in range(n_blocks)]
    if threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda a: _run_block(*a), args))
    else:
        parts = [_run_block(*a) for a in args]
    x = np.concatenate([p[0] for p in parts])
    m = np.concatenate([p[1] for p in parts])
    alive = np.concatenate([p[3] for p in parts])
    w = np.concatenate([p[2] for p in parts]) if fk else None
    n_bad = int(np.sum(~alive))
    if n_bad > MAX_EXCLUSION * n_paths:
        raise SimulationError(f"{n_bad} of {n_paths} paths became non-finite")
    if n_bad:
        warnings.warn(f"{n_bad} non-finite paths excluded", RuntimeWarning, stacklevel=3)
        x, m = x[alive], m[alive]
        w = None if w is None else w[alive]
    return x, m, w, n_bad


def simulate(model: ModelSpec, T, n_steps, n_paths, bridge_correction=True, seed=0, threads=1,
             fk_weights=False) -> PathBatch:
    """Simulate ``(X_T, M_T)`` for n_paths Euler paths.

    Parameters
    ----------
    model : ModelSpec
    T : float
        Horizon.
    n_steps, n_paths : int
    bridge_correction : bool
        Use the exact bridge-maximum draw per step instead of the discrete
        maximum over the Euler nodes.
    seed : int
        Root seed; the result does not depend on ``threads``.
    threads : int
        Worker threads over path blocks.
    fk_weights : bool
        Also accumulate ``exp(-int_0^T div B(X_u) du)`` by the trapezoidal rule.

    Returns
    -------
    PathBatch
    """
    x, m, w, n_bad = _simulate(model, T, n_steps, n_paths, bridge_correction, seed, threads, 1.0, fk_weights)
    return PathBatch(terminal=x, sup=m, weights=w, seed=int(seed), n_steps=int(n_steps), T=float(T),
                     bridge=bool(bridge_correction), n_excluded=n_bad,
                     meta={"model": model.descriptor, "x0_kind": model.descriptor.get("f0", {}).get("kind")})


# --------------------------------------------------------------------------
# density estimation
# --------------------------------------------------------------------------

def cell_histogram(batch: PathBatch, m_edges, x_edges, weights=None):
    """Cell masses of ``(M_T, X_T^1)`` on a rectangular partition.

    Returns
    -------
    mass : ndarray, shape (n_m_cells, n_x_cells)
        Fraction of paths per cell (normalised by the total path count).
    stderr : ndarray
        Binomial standard error of each cell mass.
    escaped : float
        Fraction of paths outside the partition.
    """
    m_edges = np.asarray(m_edges, dtype=float)
    x_edges = np.asarray(x_edges, dtype=float)
    n = batch.n_paths
    counts, _, _ = np.histogram2d(batch.sup, batch.terminal[:, 0], bins=[m_edges, x_edges], weights=weights)
    mass = counts / n
    stderr = np.sqrt(np.maximum(mass * (1.0 - mass), 0.0) / n)
    return mass, stderr, float(1.0 - mass.sum())


def estimate_density(batch: PathBatch, grid: TriangularGrid, method="histogram") -> JointDensityGrid:
    """Nodal density estimate on the last slice of the grid (x~ axes included for d > 1).

    ``histogram`` assigns each sample to the cell of the lattice containing
    it and sets a node's value to the mass of its dual cell (the
    ``[-h/2, h/2]^2`` square around it, clipped to the triangle) divided
    by the dual-cell area. ``kernel`` uses linear binning: each sample
    spreads its mass over the four surrounding nodes with bilinear weights,
    normalised by the integral of the hat functions over the triangle.
    Both give total mass 1 under the triangle quadrature, up to escaped
    samples.
    """
    if batch.n_paths == 0:
        raise ValueError("empty batch")
    if method not in ("histogram", "kernel"):
        raise ValueError("method must be 'histogram' or 'kernel'")
    h = grid.h
    axes = [(batch.sup, grid.m_nodes[0], h, grid.n_m), (batch.terminal[:, 0], grid.x_nodes[0], h, grid.n_x)]
    for r, ax in enumerate(grid.xt_nodes):
        axes.append((batch.terminal[:, r + 1], ax[0], ax[1] - ax[0], ax.size))
    shape = tuple(n for *_, n in axes)
    # per axis: list of (index, weight) pairs
    per_axis = []
    for v, lo, step, n in axes:
        if method == "histogram":
            per_axis.append([(np.floor((v - lo) / step + 0.5).astype(np.int64), np.ones(v.size))])
        else:
            f = (v - lo) / step
            i0 = np.floor(f).astype(np.int64)
            frac = f - i0
            per_axis.append([(i0, 1.0 - frac), (i0 + 1, frac)])
    acc = np.zeros(shape)
    for combo in itertools.product(*per_axis):
        ok = np.ones(batch.n_paths, dtype=bool)
        wt = np.ones(batch.n_paths)
        for (idx, w), n in zip(combo, shape):
            ok &= (idx >= 0) & (idx < n)
            wt = wt * w
        np.add.at(acc, tuple(idx[ok] for idx, _ in combo), wt[ok])
    # weight that rounded to a node above the diagonal belongs to the
    # diagonal node of its m row
    for j in range(grid.n_m):
        J = grid.diag_index(j)
        acc[j, J] += acc[j, J + 1:].sum(axis=0)
        acc[j, J + 1:] = 0.0
    w = grid.triangle_weights()
    for wx in grid.xt_weights():
        w = w[..., None] * wx
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(w > 0, acc / (batch.n_paths * w), 0.0)
    vals = grid.remask(vals)
    escaped = float(1.0 - np.sum(vals * w))
    if escaped > 1e-3:
        warnings.warn(f"{escaped:.3g} of the sample mass lies outside the grid", CoverageWarning, stacklevel=2)
    K = grid.times.size
    values = np.zeros((K,) + shape)
    values[-1] = vals
    return JointDensityGrid(grid, values, "monte_carlo",
                            meta={"source": "monte_carlo", "method": method, "escaped_mass": escaped,
                                  "n_paths": batch.n_paths, "seed": batch.seed, "slice": K - 1,
                                  "bridge": batch.bridge, "n_steps": batch.n_steps})


# --------------------------------------------------------------------------
# Feynman-Kac functional
# --------------------------------------------------------------------------

def feynman_kac(model: ModelSpec, f: Callable, x, t, n_paths, seed=0, n_steps=200, threads=1,
                return_stderr=False):
    """``Q_t f(x) = E[f(Y_t) exp(-int_0^t div B(Y_u) du)]`` with ``dY = -B(Y) dt + dW``.

    Parameters
    ----------
    f : callable
        Payout on points of shape (n, d).
    x : array_like
        Start point of Y.

    Returns
    -------
    value : float
        Monte Carlo mean; with ``return_stderr`` also its standard error.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != model.d:
        raise ValueError("start point has the wrong dimension")
    y, _, w, _ = _simulate(model, t, n_steps, n_paths, False, seed, threads, -1.0, True, x_start=x)
    vals = np.asarray(f(y), dtype=float).reshape(-1) * w
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else float("inf")
    return (mean, se) if return_stderr else mean


# --------------------------------------------------------------------------
# binary I/O
# --------------------------------------------------------------------------

def save_batch(batch: PathBatch, path, manifest=None):
    """Write the batch as a flat little-endian file and a JSON manifest.

    Layout: header (magic, seed, n_paths, d, T, n_steps) followed by one
    record per path: d terminal coordinates, the supremum and the weight
    (1 when weights were not requested), all float64.
    """
    w = batch.weights if batch.weights is not None else np.ones(batch.n_paths)
    rec = np.column_stack([batch.terminal, batch.sup, w]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, int(batch.seed), batch.n_paths, batch.d, float(batch.T), int(batch.n_steps)))
        fh.write(rec.tobytes())
    info = {"seed": int(batch.seed), "n_paths": batch.n_paths, "d": batch.d, "T": batch.T,
            "n_steps": batch.n_steps, "bridge": batch.bridge, "n_excluded": batch.n_excluded,
            "has_weights": batch.weights is not None, "stream": batch.stream}
    if manifest:
        info.update(manifest)
    with open(str(path) + ".json", "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
    return info


def load_batch(path) -> PathBatch:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, seed, n, d, T, n_steps = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError("not a path-batch file")
        rec = np.frombuffer(fh.read(), dtype="<f8").reshape(n, d + 2)
    try:
        with open(str(path) + ".json") as fh:
            info = json.load(fh)
    except FileNotFoundError:
        info = {}
    w = rec[:, d + 1].copy() if info.get("has_weights", False) else None
    return PathBatch(terminal=rec[:, :d].copy(), sup=rec[:, d].copy(), weights=w, seed=int(seed),
                     n_steps=int(n_steps), T=float(T), bridge=bool(info.get("bridge", True)),
                     n_excluded=int(info.get("n_excluded", 0)))


# --------------------------------------------------------------------------
# multi-slice estimates
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathSeries:
    """Suprema and first coordinates of the paths at a set of times.

    ``sup`` and ``x1`` have shape (n_times, n_paths); ``group`` labels each
    path with its block index for batch-means error bars.
    """

    times: np.ndarray
    sup: np.ndarray
    x1: np.ndarray
    group: np.ndarray
    seed: int
    steps_per_slice: int
    bridge: bool = True


def _run_series_block(model, times, steps_per_slice, n, bridge, seed, block):
    rng = _block_generator(seed, block)
    x = _start_points(model, rng, n)
    m = x[:, 0].copy()
    d = model.d
    K = times.size
    sup = np.empty((K, n))
    x1 = np.empty((K, n))
    t_prev = 0.0
    with np.errstate(all="ignore"):
        for k in range(K):
            dt = (times[k] - t_prev) / steps_per_slice
            sq = math.sqrt(dt)
            xi = rng.standard_normal((steps_per_slice, n, d))
            u = rng.random((steps_per_slice, n)) if bridge else None
            for s in range(steps_per_slice):
                b = np.broadcast_to(np.asarray(model.drift_fn(x), dtype=float), x.shape)
                xn = x + b * dt + sq * xi[s]
                step_max = bridge_max_sample(x[:, 0], xn[:, 0], dt, 1.0 - u[s]) if bridge else xn[:, 0]
                np.maximum(m, step_max, out=m)
                x = xn
            sup[k] = m
            x1[k] = x[:, 0]
            t_prev = times[k]
    return sup, x1


def simulate_series(model: ModelSpec, times, steps_per_slice, n_paths, bridge_correction=True, seed=0,
                    threads=1) -> PathSeries:
    """Record ``(M_t, X_t^1)`` at each of the given times along the same paths."""
    times = np.asarray(times, dtype=float)
    if n_paths < 1 or steps_per_slice < 1:
        raise ValueError("n_paths and steps_per_slice must be at least 1")
    n_blocks = -(-n_paths // BLOCK_SIZE)
    sizes = [min(BLOCK_SIZE, n_paths - b * BLOCK_SIZE) for b in range(n_blocks)]

    def run(b):
        return _run_series_block(model, times, int(steps_per_slice), sizes[b], bridge_correction, seed, b)

    if threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(n_blocks)))
    else:
        parts = [run(b) for b in range(n_blocks)]
    sup = np.concatenate([p[0] for p in parts], axis=1)
    x1 = np.concatenate([p[1] for p in parts], axis=1)
    group = np.concatenate([np.full(s, b) for b, s in enumerate(sizes)])
    if not (np.all(np.isfinite(sup)) and np.all(np.isfinite(x1))):
        raise SimulationError("non-finite states in the path series")
    return PathSeries(times=times, sup=sup, x1=x1, group=group, seed=int(seed),
                      steps_per_slice=int(steps_per_slice), bridge=bool(bridge_correction))


def estimate_density_series(series: PathSeries, grid: TriangularGrid, method="histogram", select=None):
    """Density estimate on every grid slice from a path series.

    ``select`` is an optional boolean mask over paths (used for batch means).
    """
    if series.times.size != grid.times.size or np.any(np.abs(series.times - grid.times) > 1e-12):
        raise ValueError("series times must match the grid slices")
    idx = np.arange(series.sup.shape[1]) if select is None else np.flatnonzero(select)
    K = grid.times.size
    values = np.zeros((K, grid.n_m, grid.n_x))
    escaped = []
    for k in range(K):
        b = PathBatch(terminal=series.x1[k, idx], sup=series.sup[k, idx], weights=None, seed=series.seed,
                      n_steps=series.steps_per_slice * (k + 1), T=float(series.times[k]), bridge=series.bridge)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CoverageWarning)
            est = estimate_density(b, grid, method)
        values[k] = est.values[-1]
        escaped.append(est.meta["escaped_mass"])
    return JointDensityGrid(grid, values, "monte_carlo",
                            meta={"source": "monte_carlo", "method": method, "n_paths": int(idx.size),
                                  "seed": series.seed, "escaped_mass": escaped})
