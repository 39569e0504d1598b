"""File formats: TOML configuration, density CSV, JSON manifests.

Numbers are written with 17 significant digits so that a round trip is
exact and reruns can be compared byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import platform
import sys
import time

import numpy as np

from .model_core import JointDensityGrid, TriangularGrid

try:  # Python >= 3.11
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as _toml

__all__ = [
    "DensityParseError",
    "load_config",
    "config_hash",
    "write_density_csv",
    "read_density_csv",
    "write_json",
    "versions",
    "Manifest",
]

FLOAT = "%.17g"
_MAGIC = "# supdens-density v1 "


class DensityParseError(ValueError):
    """Malformed density file; the message carries ``path:line``."""


def load_config(path):
    """Parse a TOML configuration file into a dict."""
    with open(path, "rb") as fh:
        return _toml.load(fh)


def config_hash(cfg):
    """SHA-256 of the canonical JSON form of a configuration."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _fmt(v):
    return FLOAT % v


def write_density_csv(p: JointDensityGrid, path, model_label=""):
    """One row per active node and slice: ``k, t, m, x1[, x2], p``.

    The first line is a comment holding the grid as JSON, which is all a
    reader needs to rebuild the lattice.
    """
    g = p.grid
    head = {"x_nodes": [g.box[0], g.box[1], g.n_x], "m_offset": g.m_offset,
            "times": [_fmt(t) for t in g.times], "T": _fmt(g.T),
            "xt": [[float(a[0]), float(a[-1]), int(a.size)] for a in g.xt_nodes],
            "provenance": p.provenance, "model": model_label}
    cols = ["k", "t", "m", "x1"] + [f"x{r + 2}" for r in range(len(g.xt_nodes))] + ["p"]
    lines = [_MAGIC + json.dumps(head, sort_keys=True), ",".join(cols)]
    J = np.arange(g.n_m) + g.m_offset
    for k, t in enumerate(g.times):
        ts = _fmt(t)
        for j in range(g.n_m):
            ms = _fmt(g.m_nodes[j])
            for i in range(J[j] + 1):
                xs = _fmt(g.x_nodes[i])
                if g.d == 1:
                    lines.append(f"{k},{ts},{ms},{xs},{_fmt(p.values[k, j, i])}")
                else:
                    y = g.xt_nodes[0]
                    for l in range(y.size):
                        lines.append(f"{k},{ts},{ms},{xs},{_fmt(y[l])},{_fmt(p.values[k, j, i, l])}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_density_csv(path):
    """Inverse of :func:`write_density_csv`.

    Raises
    ------
    DensityParseError
        With ``path:line`` for a bad header, a non-numeric field, a wrong
        field count or a node that is not on the lattice.
    """
    with open(path) as fh:
        text = fh.read().splitlines()
    if not text or not text[0].startswith(_MAGIC):
        raise DensityParseError(f"{path}:1: missing density header")
    try:
        head = json.loads(text[0][len(_MAGIC):])
        lo, hi, nx = head["x_nodes"]
        xt = tuple(np.linspace(a, b, int(n)) for a, b, n in head["xt"])
        times = np.array([float(t) for t in head["times"]])
        grid = TriangularGrid(x_nodes=np.linspace(lo, hi, int(nx)), m_offset=int(head["m_offset"]),
                              times=times, T=float(head["T"]), xt_nodes=xt)
    except (ValueError, KeyError, TypeError) as exc:
        raise DensityParseError(f"{path}:1: bad header ({exc})") from None
    if len(text) < 2:
        raise DensityParseError(f"{path}:2: missing column line")
    ncol = 5 + len(xt)
    if len(text[1].split(",")) != ncol:
        raise DensityParseError(f"{path}:2: expected {ncol} columns")
    shape = (times.size, grid.n_m, grid.n_x) + tuple(a.size for a in xt)
    vals = np.zeros(shape)
    h = grid.h
    for ln, line in enumerate(text[2:], start=3):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != ncol:
            raise DensityParseError(f"{path}:{ln}: expected {ncol} fields, got {len(parts)}")
        try:
            k = int(parts[0])
            nums = [float(s) for s in parts[1:]]
        except ValueError:
            raise DensityParseError(f"{path}:{ln}: non-numeric field") from None
        if not np.all(np.isfinite(nums)):
            raise DensityParseError(f"{path}:{ln}: non-finite value")
        t, m, x = nums[:3]
        if not 0 <= k < times.size or abs(times[k] - t) > 1e-12 * max(1.0, t):
            raise DensityParseError(f"{path}:{ln}: slice index does not match its time")
        j = int(round((m - grid.m_nodes[0]) / h))
        i = int(round((x - grid.x_nodes[0]) / h))
        idx = [k, j, i]
        for r, ax in enumerate(xt):
            idx.append(int(round((nums[3 + r] - ax[0]) / (ax[1] - ax[0]))))
        inside = 0 <= j < grid.n_m and 0 <= i <= j + grid.m_offset
        inside = inside and all(0 <= idx[3 + r] < ax.size for r, ax in enumerate(xt))
        if not inside or abs(grid.m_nodes[min(max(j, 0), grid.n_m - 1)] - m) > 1e-9 * max(1.0, h):
            raise DensityParseError(f"{path}:{ln}: node ({m:g}, {x:g}) is not on the lattice")
        vals[tuple(idx)] = nums[-1]
    prov = head.get("provenance", "parametrix")
    return JointDensityGrid(grid, vals, prov, meta={"source": "file", "path": str(path),
                                                     "model": head.get("model", "")})


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return str(o)


def versions():
    import numba
    import scipy

    from . import __version__
    return {"supdens": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": sys.version.split()[0], "platform": platform.machine()}


class Manifest:
    """Collects run metadata; ``finish`` stamps the wall-clock and writes it."""

    def __init__(self, command, cfg, seed, threads):
        self.data = {"command": command, "config_hash": config_hash(cfg), "seed": int(seed),
                     "threads": int(threads), "versions": versions(), "config": cfg,
                     "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())}
        self._t0 = time.perf_counter()

    def __setitem__(self, key, value):
        self.data[key] = value

    def finish(self, path, status):
        self.data["status"] = status
        self.data["wall_clock_s"] = time.perf_counter() - self._t0
        write_json(self.data, path)
        return self.data
