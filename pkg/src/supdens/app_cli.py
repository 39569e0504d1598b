"""Command-line front end: ``supdens {selftest,density,verify,price}``.

Every command writes a JSON manifest (config hash, seed, versions,
wall-clock, status) next to its numeric outputs. Numeric files depend
only on the configuration and the seed, never on the thread count.
The default output directory is taken from ``SUPDENS_OUT``.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io, kernels
from .brownian_reference import exact_density_grid, p0_seed
from .mc_engine import CoverageWarning, estimate_density, estimate_density_series, simulate, simulate_series
from .model_core import TriangularGrid, build_model, default_grid
from .parametrix_solver import DivergenceError, solve, solve_d2_smoke
from .pde_verifier import (ConfigurationError, diagonal_volterra_residual, qh_evolution_residual,
                           strong_boundary_residual, weak_battery, x_membership)
from .pricing import barrier_touch_prob, cross_validate, lookback_put, write_price_csv

__all__ = ["main", "run_selftest", "model_from_config", "grid_from_config", "density_from_config"]

OUT_ENV = "SUPDENS_OUT"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


# --------------------------------------------------------------------------
# configuration helpers
# --------------------------------------------------------------------------

def model_from_config(cfg):
    """``(ModelSpec, model_id)`` from the ``[model]`` table."""
    mc = cfg.get("model", {})
    d = int(mc.get("d", 1))
    drift = mc.get("drift", {"kind": "zero"})
    f0 = mc.get("f0", {"kind": "point", "mean": [0.0] * d})
    mid = str(mc.get("id", drift.get("kind", "model")))
    return build_model(drift, f0, d=d, label=mid), mid


def grid_from_config(cfg, model, level=1):
    """Grid from ``[grid]``; ``level = 2`` halves cells and slices."""
    gc = cfg.get("grid", {})
    T = float(gc.get("T", 1.0))
    n_cells = int(gc.get("n_cells", 128)) // level
    n_slices = int(gc.get("n_slices", 32)) // level
    if "lo" in gc:
        xt = None
        if model.d == 2:
            xt = gc.get("xt_box", [gc["lo"], gc["hi"]])
        return TriangularGrid.uniform(float(gc["lo"]), float(gc["hi"]), n_cells, T, n_slices,
                                      m_lo=gc.get("m_lo"), xt_cells=n_cells if model.d == 2 else None,
                                      xt_box=xt)
    return default_grid(model, T, n_cells, n_slices, tail=float(gc.get("tail", 1e-8)))


def _seed(cfg, args):
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


def _threads(cfg, args):
    return int(args.threads if args.threads is not None else cfg.get("threads", 1))


def density_from_config(cfg, model, grid, seed, threads):
    """Run the configured source. Returns ``(density, report)``."""
    dc = cfg.get("density", {})
    source = dc.get("source", "exact")
    if source == "exact":
        if model.drift_kind == "zero":
            return p0_seed(model, grid), {"source": "exact"}
        return exact_density_grid(model, grid), {"source": "exact"}
    if source == "parametrix":
        if model.d == 2:
            dens, rep = solve_d2_smoke(model, grid, n_sub=int(dc.get("n_sub", 1)))
            return dens, rep
        return solve(model, grid, max_iter=int(dc.get("max_iter", 50)), tol=float(dc.get("tol", 1e-10)))
    if source == "mc":
        n_paths = int(dc.get("n_paths", 200_000))
        steps = int(dc.get("n_steps", 64))
        method = dc.get("method", "histogram")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CoverageWarning)
            if model.d == 1:
                series = simulate_series(model, grid.times, steps, n_paths, seed=seed, threads=threads)
                dens = estimate_density_series(series, grid, method)
            else:
                batch = simulate(model, grid.T, steps * grid.times.size, n_paths, seed=seed, threads=threads)
                dens = estimate_density(batch, grid, method)
        return dens, {"source": "mc", "n_paths": n_paths, "steps_per_slice": steps, "method": method}
    raise ConfigurationError(f"unknown density source {source!r}")


def _out_dir(args):
    out = Path(args.out or os.environ.get(OUT_ENV, "supdens_out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    return io.load_config(args.config) if args.config else {}


# --------------------------------------------------------------------------
# selftest
# --------------------------------------------------------------------------

def run_selftest(overrides=None):
    """Kernel-algebra property suite.

    ``overrides`` maps names in :mod:`supdens.kernels` to replacements
    (used to check that a broken kernel is caught). Returns a list of
    ``(name, passed, detail)``.
    """
    k = dict(vars(kernels))
    k.update(overrides or {})
    rng = np.random.default_rng(20240917)
    out = []

    def check(name, fn):
        try:
            ok, detail = fn()
        except Exception as exc:  # a raising property is a failing property
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))

    def phi_mass():
        from scipy import integrate
        val = integrate.quad(lambda u: k["phi1"](u, 0.7), -np.inf, np.inf)[0]
        return abs(val - 1) < 1e-10, f"mass {val:.12f}"

    def phi_factor():
        u = rng.normal(size=(20, 3))
        lhs = k["phi"](u, 0.8)
        rhs = np.prod(k["phi1"](u, 0.8), axis=-1)
        err = float(np.max(np.abs(lhs - rhs) / rhs))
        return err < 1e-12, f"max rel {err:.2e}"

    def convolution():
        worst = 0.0
        for _ in range(20):
            a, b = rng.normal(size=2)
            s, r = rng.uniform(0.05, 2.0, size=2)
            an, qd = k["gaussian_convolve_check"](a, b, s, r)
            worst = max(worst, abs(an - qd))
        return worst < 1e-7, f"max abs {worst:.2e}"

    def g_power():
        worst = 0.0
        for alpha in (0.3, 0.5, 0.8):
            for n in (2, 3, 4):
                c = k["g_alpha_power"](n, alpha, 0.7)
                num = kernels.g_alpha_power_numeric(n, alpha, 0.7)
                worst = max(worst, abs(c - num) / abs(num))
        return worst < 1e-4, f"max rel {worst:.2e}"

    def g_recursion():
        worst = 0.0
        for alpha in (0.3, 0.8):
            for n in (1, 5, 9):
                lhs = kernels.g_alpha_recursion_numeric(n, alpha, 1.3)
                rhs = k["g_alpha_power"](n + 1, alpha, 1.3)
                worst = max(worst, abs(lhs - rhs) / abs(rhs))
        return worst < 1e-6, f"max rel {worst:.2e}"

    def g_positive():
        v = np.array([k["g_alpha_power"](n, 0.5, 0.9) for n in range(1, 30)])
        return bool(np.all(v > 0)), f"min {v.min():.3e}"

    def bound_to_zero():
        lb = k["log_contraction_bound"](np.arange(1, 501), 0.5, 1.0, 1.0, 1.0)
        tail_down = bool(np.all(np.diff(lb[100:]) < 0))
        return bool(lb[-1] < -100 and tail_down and np.all(np.isfinite(lb))), f"log b_500 = {lb[-1]:.1f}"

    def bound_direct():
        n = np.arange(1, 40)
        a = k["contraction_bound"](n, 0.5, 1.2, 2.0, 0.8)
        b = k["contraction_bound_direct"](n, 0.5, 1.2, 2.0, 0.8)
        err = float(np.max(np.abs(a - b) / b))
        return err < 1e-10, f"max rel {err:.2e}"

    def mollifier_mass():
        from scipy import integrate
        mol = k["mollifier"](0.4, 0.3)
        val = integrate.quad(mol, 0.3 - 0.4, 0.3 + 0.4, limit=200)[0]
        return abs(val - 1) < 1e-9, f"mass {val:.12f}"

    def mollifier_support():
        mol = k["mollifier"](0.4, 0.3)
        u = np.array([-0.11, -0.1000001, 0.7000001, 0.9])
        vals = np.abs(np.concatenate([mol(u), mol.d1(u), mol.d2(u)]))
        return bool(np.all(vals < 1e-12)), f"max outside {vals.max():.1e}"

    def profile_derivatives():
        pr = k["Profile"](center=0.2, eps=0.9, degree=1)
        u = np.linspace(-0.5, 0.9, 15)
        hh = 1e-5
        fd1 = (pr(u + hh) - pr(u - hh)) / (2 * hh)
        fd2 = (pr(u + hh) - 2 * pr(u) + pr(u - hh)) / hh ** 2
        e1 = float(np.max(np.abs(fd1 - pr.d1(u))))
        e2 = float(np.max(np.abs(fd2 - pr.d2(u))))
        return e1 < 1e-6 and e2 < 1e-3, f"d1 {e1:.1e}, d2 {e2:.1e}"

    check("phi_unit_mass", phi_mass)
    check("phi_factorises", phi_factor)
    check("gaussian_convolution_identity", convolution)
    check("g_alpha_power_closed_form", g_power)
    check("g_alpha_power_recursion", g_recursion)
    check("g_alpha_power_positive", g_positive)
    check("contraction_bound_to_zero", bound_to_zero)
    check("contraction_bound_log_vs_direct", bound_direct)
    check("mollifier_unit_mass", mollifier_mass)
    check("mollifier_compact_support", mollifier_support)
    check("profile_derivatives", profile_derivatives)
    return out


def cmd_selftest(args):
    res = run_selftest()
    cfg = {"command": "selftest"}
    man = io.Manifest("selftest", cfg, 0, 1)
    for name, ok, detail in res:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    failed = [n for n, ok, _ in res if not ok]
    man["properties"] = [{"name": n, "pass": ok, "detail": d} for n, ok, d in res]
    if args.out or os.environ.get(OUT_ENV):
        man.finish(_out_dir(args) / "selftest.json", "pass" if not failed else "fail")
    if failed:
        print(f"first failing property: {failed[0]}", file=sys.stderr)
        return EXIT_FAIL
    print(f"{len(res)} properties passed")
    return EXIT_OK


# --------------------------------------------------------------------------
# density
# --------------------------------------------------------------------------

def cmd_density(args):
    cfg = _load(args)
    seed, threads = _seed(cfg, args), _threads(cfg, args)
    out = _out_dir(args)
    man = io.Manifest("density", cfg, seed, threads)
    model, mid = model_from_config(cfg)
    grid = grid_from_config(cfg, model)
    man["grid"] = grid.describe()
    try:
        dens, report = density_from_config(cfg, model, grid, seed, threads)
    except DivergenceError as exc:
        man["convergence"] = exc.report
        man["error"] = str(exc)
        man.finish(out / "density.json", "diverged")
        print(f"solver diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    io.write_density_csv(dens, out / "density.csv", mid)
    man["provenance"] = dens.provenance
    man["convergence"] = report
    man["mass"] = dens.mass().tolist()
    man.finish(out / "density.json", "ok")
    print(f"wrote {out / 'density.csv'} ({dens.provenance})")
    return EXIT_OK


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------

def cmd_verify(args):
    cfg = _load(args)
    seed, threads = _seed(cfg, args), _threads(cfg, args)
    out = _out_dir(args)
    man = io.Manifest("verify", cfg, seed, threads)
    vc = cfg.get("verify", {})
    scale = float(args.gate_scale)
    try:
        dens = [io.read_density_csv(p) for p in args.density]
    except io.DensityParseError as exc:
        man["error"] = str(exc)
        man.finish(out / "verify.json", "parse_error")
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    model, mid = model_from_config(cfg)
    rows = []

    def gate(check, ident, t, value, limit):
        ok = bool(np.isfinite(value) and abs(value) <= limit)
        rows.append((check, ident, t, value, limit, ok))
        return ok

    weak_gate = float(vc.get("weak_gate", 1.0)) * scale
    bnd_gate = float(vc.get("boundary_gate", 10.0)) * scale
    for n, p in enumerate(dens):
        tag = f"density{n}"
        for r in weak_battery(p, model):
            gate("weak", f"{tag}:{r.phi_id}", r.t, r.residual, weak_gate * r.error_estimate)
        if p.grid.d == 1:
            sb = strong_boundary_residual(p, model)
            gate("strong_boundary", tag, sb.t, sb.max_abs, bnd_gate * sb.h)
        mem = x_membership(p)
        for key in ("a", "b", "c_sup_integral"):
            gate(f"membership_{key}", tag, p.grid.T, mem[key], math.inf)
    if len(dens) == 2:
        p1, p2 = dens
        v_gate = float(vc.get("volterra_gate", 1e-2)) * scale
        q_gate = float(vc.get("qh_gate", 1e-2)) * scale
        if model.drift_kind in ("zero", "constant"):
            vr = diagonal_volterra_residual(p1, p2, model)
            gate("diagonal_volterra", "pair", p1.grid.T, float(np.max(np.abs(vr))), v_gate)
        x0 = float(model.x0[0])
        H = kernels.Profile(center=x0 + 2.0, eps=1.5)
        F = tuple(kernels.Profile(center=float(c), eps=1.5) for c in model.x0)
        F = F[0] if model.d == 1 else F
        gate("qh_evolution", "pair", p1.grid.T, qh_evolution_residual(p1, p2, model, H, F), q_gate)
    ok = all(r[-1] for r in rows)
    with open(out / "verify.csv", "w", newline="\n") as fh:
        fh.write("check,id,t,value,gate,pass\n")
        for check, ident, t, value, limit, passed in rows:
            fh.write(f"{check},{ident},{io.FLOAT % t},{io.FLOAT % value},{io.FLOAT % limit},{int(passed)}\n")
    man["model"] = mid
    man["n_checks"] = len(rows)
    man["failed"] = [f"{c}:{i}" for c, i, *_, passed in rows if not passed]
    man.finish(out / "verify.json", "pass" if ok else "gate_breach")
    for c, i, t, v, lim, passed in rows:
        if not passed:
            print(f"FAIL {c} {i} t={t:g}: |{v:.3e}| > {lim:.3e}", file=sys.stderr)
    print(f"{sum(r[-1] for r in rows)}/{len(rows)} checks within gates")
    return EXIT_OK if ok else EXIT_FAIL


# --------------------------------------------------------------------------
# price
# --------------------------------------------------------------------------

def price_reports(cfg, seed, threads):
    """Density-route and MC-route reports plus cross-validation verdicts."""
    model, mid = model_from_config(cfg)
    pc = cfg.get("price", {})
    Ts = [float(t) for t in pc.get("T", [cfg.get("grid", {}).get("T", 1.0)])]
    barriers = [float(b) for b in pc.get("barriers", [])]
    n_sigma = float(pc.get("n_sigma", 3.0))
    sub = dict(cfg)
    sub["grid"] = dict(cfg.get("grid", {}), T=max(Ts))
    src = pc.get("density_source", "exact" if model.drift_kind in ("zero", "constant") else "parametrix")
    sub["density"] = dict(cfg.get("density", {}), source=src)
    fine_grid = grid_from_config(sub, model)
    fine, _ = density_from_config(sub, model, fine_grid, seed, threads)
    coarse, _ = density_from_config(sub, model, fine_grid.coarsen(), seed, threads)
    reports, verdicts = [], []
    n_paths = int(pc.get("n_paths", 200_000))
    steps_per_unit = int(pc.get("steps_per_unit", 1000))
    for T in Ts:
        # same seed for every T: common random numbers across the sweep
        batch = simulate(model, T, max(1, round(steps_per_unit * T)), n_paths, seed=seed, threads=threads)
        pairs = [(lookback_put(mid, T, "density", density=fine, coarse=coarse),
                  lookback_put(mid, T, "monte_carlo", batch=batch))]
        for L in barriers:
            pairs.append((barrier_touch_prob(mid, L, T, "density", density=fine, coarse=coarse),
                          barrier_touch_prob(mid, L, T, "monte_carlo", batch=batch)))
        for a, b in pairs:
            reports += [a, b]
            v = cross_validate(a, b, n_sigma)
            v["T"] = T
            verdicts.append(v)
    return reports, verdicts


def cmd_price(args):
    cfg = _load(args)
    seed, threads = _seed(cfg, args), _threads(cfg, args)
    out = _out_dir(args)
    man = io.Manifest("price", cfg, seed, threads)
    reports, verdicts = price_reports(cfg, seed, threads)
    write_price_csv(reports, out / "price.csv")
    ok = all(v["pass"] for v in verdicts)
    man["cross_validation"] = verdicts
    man.finish(out / "price.json", "pass" if ok else "cross_validation_failure")
    for v in verdicts:
        print(f"{'PASS' if v['pass'] else 'FAIL'} {v['quantity']} T={v['T']:g}: "
              f"|diff| {v['difference']:.3e} vs {v['n_sigma']:g} x {v['combined_error']:.3e}")
    return EXIT_OK if ok else EXIT_FAIL


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _parser():
    ap = argparse.ArgumentParser(prog="supdens", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="TOML configuration file")
    common.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    common.add_argument("--threads", type=int, default=None, help="worker threads")
    common.add_argument("--out", type=str, default=None, help=f"output directory (default ${OUT_ENV})")
    common.add_argument("--gate-scale", type=float, default=1.0, help="multiplier on every gate")
    sp = ap.add_subparsers(dest="command", required=True)
    sp.add_parser("selftest", parents=[common], help="kernel-algebra property suite")
    sp.add_parser("density", parents=[common], help="compute a joint density")
    v = sp.add_parser("verify", parents=[common], help="weak/strong residuals of density files")
    v.add_argument("density", nargs="+", help="one or two density CSV files")
    sp.add_parser("price", parents=[common], help="lookback and barrier prices, both routes")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "verify" and len(args.density) > 2:
        print("verify takes one or two density files", file=sys.stderr)
        return EXIT_USAGE
    cmd = {"selftest": cmd_selftest, "density": cmd_density, "verify": cmd_verify, "price": cmd_price}
    return cmd[args.command](args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
