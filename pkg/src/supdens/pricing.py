"""Lookback and barrier quantities from a density or from simulated paths.

The density route integrates over the triangle with the same quadrature
as the verifier and divides by the quadrature mass of the slice. With a
density on the twice-coarser grid it applies one Richardson step and
reports ``|P_h - P_2h| / 3`` as the error. The Monte Carlo route reports
the sample mean and its standard error.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .mc_engine import PathBatch
from .model_core import JointDensityGrid

__all__ = [
    "PriceReport",
    "CrossValidationError",
    "lookback_put",
    "barrier_touch_prob",
    "cross_validate",
    "write_price_csv",
]


class CrossValidationError(RuntimeError):
    """Density and Monte Carlo routes disagree beyond the combined error."""


@dataclass
class PriceReport:
    """One priced quantity.

    ``error`` is a quadrature estimate (density) or the standard error
    (Monte Carlo).
    """

    model_id: str
    T: float
    quantity: str
    value: float
    error: float
    source: str

    def to_row(self):
        return asdict(self)


def _slice(p: JointDensityGrid, T):
    g = p.grid
    if T is None:
        return g.times.size - 1
    k = int(np.argmin(np.abs(g.times - T)))
    if abs(g.times[k] - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"density does not cover T = {T}")
    return k


def _collapse(p, v):
    for wx in p.grid.xt_weights():
        v = np.tensordot(v, wx, axes=([-1], [0]))
    return v


def _lookback_quad(p: JointDensityGrid, k):
    g = p.grid
    w = g.triangle_weights()
    v = _collapse(p, p.values[k])
    spread = g.m_nodes[:, None] - g.x_nodes[None, :]
    mass = float(np.sum(v * w))
    return float(np.sum(v * spread * w)) / mass


def _touch_quad(p: JointDensityGrid, k, L):
    g = p.grid
    w = g.triangle_weights()
    v = _collapse(p, p.values[k])
    rows = np.sum(v * w, axis=1) / (g.h * np.where(np.arange(g.n_m) % (g.n_m - 1) == 0, 0.5, 1.0))
    # rows[j] is the sup-marginal density at m_j; integrate the piecewise-linear
    # interpolant over [L, m_max] and divide by the total
    m = g.m_nodes
    total = np.trapezoid(rows, m)
    if L <= m[0]:
        return 1.0
    if L >= m[-1]:
        return 0.0
    j = int(np.searchsorted(m, L) - 1)
    frac = (L - m[j]) / (m[j + 1] - m[j])
    fL = rows[j] + frac * (rows[j + 1] - rows[j])
    upper = 0.5 * (fL + rows[j + 1]) * (m[j + 1] - L) + float(
        np.sum(0.5 * (rows[j + 1:-1] + rows[j + 2:]) * np.diff(m[j + 1:])))
    return float(upper / total)


def lookback_put(model_id, T=None, source="density", density: JointDensityGrid = None, coarse: JointDensityGrid = None,
                 batch: PathBatch = None):
    """``E[M_T - X_T^1]``.

    Parameters
    ----------
    model_id : str
        Label copied into the report.
    source : {'density', 'monte_carlo'}
    density, coarse : JointDensityGrid
        Density at T and optionally the same law on the twice-coarser grid.
    batch : PathBatch
        Paths simulated to T.
    """
    if source == "density":
        if density is None:
            raise ValueError("density route needs a density")
        k = _slice(density, T)
        t = float(density.grid.times[k])
        ph = _lookback_quad(density, k)
        if coarse is not None:
            p2h = _lookback_quad(coarse, _slice(coarse, t))
            return PriceReport(model_id, t, "lookback_put", (4.0 * ph - p2h) / 3.0, abs(ph - p2h) / 3.0, "density")
        return PriceReport(model_id, t, "lookback_put", ph, float("nan"), "density")
    if source == "monte_carlo":
        if batch is None:
            raise ValueError("Monte Carlo route needs a path batch")
        if T is not None and abs(batch.T - T) > 1e-12 * max(1.0, T):
            raise ValueError("batch was simulated to a different horizon")
        pay = batch.sup - batch.terminal[:, 0]
        return PriceReport(model_id, batch.T, "lookback_put", float(pay.mean()),
                           float(pay.std(ddof=1) / math.sqrt(pay.size)), "monte_carlo")
    raise ValueError("source must be 'density' or 'monte_carlo'")


def barrier_touch_prob(model_id, L, T=None, source="density", density: JointDensityGrid = None,
                       coarse: JointDensityGrid = None, batch: PathBatch = None):
    """``P(M_T >= L)``."""
    if source == "density":
        if density is None:
            raise ValueError("density route needs a density")
        k = _slice(density, T)
        t = float(density.grid.times[k])
        ph = _touch_quad(density, k, L)
        if coarse is not None:
            p2h = _touch_quad(coarse, _slice(coarse, t), L)
            val = min(1.0, max(0.0, (4.0 * ph - p2h) / 3.0))
            return PriceReport(model_id, t, f"touch_prob@{L:g}", val, abs(ph - p2h) / 3.0, "density")
        return PriceReport(model_id, t, f"touch_prob@{L:g}", ph, float("nan"), "density")
    if source == "monte_carlo":
        if batch is None:
            raise ValueError("Monte Carlo route needs a path batch")
        hit = (batch.sup >= L).astype(float)
        pr = float(hit.mean())
        return PriceReport(model_id, batch.T, f"touch_prob@{L:g}", pr,
                           float(math.sqrt(max(pr * (1 - pr), 0.0) / hit.size)), "monte_carlo")
    raise ValueError("source must be 'density' or 'monte_carlo'")


def cross_validate(a: PriceReport, b: PriceReport, n_sigma=3.0, raise_on_failure=False):
    """Agreement within ``n_sigma`` combined errors (errors added in quadrature)."""
    ea = 0.0 if not np.isfinite(a.error) else a.error
    eb = 0.0 if not np.isfinite(b.error) else b.error
    comb = math.hypot(ea, eb)
    diff = abs(a.value - b.value)
    ok = diff <= n_sigma * comb
    verdict = {"quantity": a.quantity, "difference": diff, "combined_error": comb, "n_sigma": n_sigma,
               "z": diff / comb if comb > 0 else float("inf"), "pass": bool(ok)}
    if raise_on_failure and not ok:
        raise CrossValidationError(f"{a.quantity}: routes differ by {diff:.3g} > {n_sigma} x {comb:.3g}")
    return verdict


def write_price_csv(reports, path):
    """CSV with columns model_id, T, quantity, value, error, source."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_id", "T", "quantity", "value", "error", "source"])
        for r in reports:
            w.writerow([r.model_id, "%.17g" % r.T, r.quantity, "%.17g" % r.value, "%.17g" % r.error, r.source])
