"""Compiled loops for the parametrix solver (d = 1)."""

import math

import numpy as np
from numba import njit

_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True, inline="always")
def _phi(z, v):
    return _INV_SQRT2PI / math.sqrt(v) * math.exp(-0.5 * z * z / v)


@njit(cache=True, inline="always")
def _interp(tab, lo, dx, a):
    u = (a - lo) / dx
    n = tab.shape[0]
    if u <= 0.0:
        return tab[0]
    if u >= n - 1:
        return tab[n - 1]
    i = int(u)
    f = u - i
    return tab[i] * (1.0 - f) + tab[i + 1] * f


@njit(cache=True)
def seed_correction(xn, off, times, x0s, w0s, btab, dbtab, tab_lo, tab_dx,
                    s_u, s_w, a_x, a_w, nsig):
    """First correction D1 = A[p0] + Bt[p0] on the grid.

    ``s_u``/``s_w``: nodes and weights on [0, 1] for the map s = t u
    (already containing the sin^2 substitution Jacobian). ``a_x``/``a_w``:
    Gauss-Legendre nodes on [-1, 1]. Returns the two terms separately.
    """
    K = times.shape[0]
    nx = xn.shape[0]
    nm = nx - off
    outA = np.zeros((K, nm, nx))
    outB = np.zeros((K, nm, nx))
    na = a_x.shape[0]
    for k in range(K):
        t = times[k]
        for j in range(nm):
            J = j + off
            m = xn[J]
            for i in range(J + 1):
                x = xn[i]
                accA = 0.0
                accB = 0.0
                for g in range(x0s.shape[0]):
                    x0 = x0s[g]
                    if m < x0:
                        continue
                    c1 = 2.0 * m - x
                    c2 = 2.0 * m - x0
                    sa = 0.0
                    sb = 0.0
                    for q in range(s_u.shape[0]):
                        s = t * s_u[q]
                        tau = t - s
                        if s <= 0.0 or tau <= 0.0:
                            continue
                        vv = s * tau / t
                        sig = math.sqrt(vv)
                        # four Gaussian pairs: (centre_a, var_a) x (centre_b, var_b)
                        tot_a = 0.0
                        tot_b = 0.0
                        for piece in range(4):
                            if piece == 0:
                                ca, cb = c1, x0      # A: g_tau(c1-a) phi_s(a-x0)
                                amp = _phi(c1 - x0, t)
                                cs = (s * c1 + tau * x0) / t
                            elif piece == 1:
                                ca, cb = c1, c2      # A: g_tau(c1-a) phi_s(c2-a)
                                amp = _phi(c1 - c2, t)
                                cs = (s * c1 + tau * c2) / t
                            elif piece == 2:
                                ca, cb = x, c2       # Bt: phi_tau(a-x) phi_s(a-c2)
                                amp = _phi(x - c2, t)
                                cs = (s * x + tau * c2) / t
                            else:
                                ca, cb = c1, c2      # Bt: phi_tau(a-c1) phi_s(a-c2)
                                amp = _phi(c1 - c2, t)
                                cs = (s * c1 + tau * c2) / t
                            if amp < 1e-300:
                                continue
                            lo = cs - nsig * sig
                            hi = cs + nsig * sig
                            if hi > m:
                                hi = m
                            if hi <= lo:
                                continue
                            half = 0.5 * (hi - lo)
                            mid = 0.5 * (hi + lo)
                            acc = 0.0
                            for r in range(na):
                                a = mid + half * a_x[r]
                                gw = _phi(a - cs, vv)
                                b = _interp(btab, tab_lo, tab_dx, a)
                                db = _interp(dbtab, tab_lo, tab_dx, a)
                                if piece == 0:
                                    f = (2.0 * (c1 - a) / tau) * (db - b * (a - x0) / s)
                                elif piece == 1:
                                    f = (2.0 * (c1 - a) / tau) * (-db - b * (c2 - a) / s)
                                else:
                                    w = c2 - a
                                    f = db * 2.0 * w / s - b * (2.0 / s) * (1.0 - w * w / s)
                                    if piece == 3:
                                        f = -f
                                acc += a_w[r] * gw * f
                            acc *= half * amp
                            if piece < 2:
                                tot_a += acc
                            else:
                                tot_b += acc
                        sa += s_w[q] * t * tot_a
                        sb += s_w[q] * t * tot_b
                    accA -= w0s[g] * sa
                    accB -= w0s[g] * sb
                outA[k, j, i] = accA
                outB[k, j, i] = accB
    return outA, outB


@njit(cache=True)
def cumulative_below(R, bvals, off):
    """C[k, j, l] = B(a_l) * int_{max(a_l, m_0)}^{m_j} R[k, ., l] db (trapezoid)."""
    K, nm, nx = R.shape
    h = 1.0
    C = np.zeros((K, nm, nx))
    for k in range(K):
        for l in range(nx):
            js = l - off
            if js < 0:
                js = 0
            acc = 0.0
            for j in range(js + 1, nm):
                acc += 0.5 * (R[k, j - 1, l] + R[k, j, l])
                C[k, j, l] = bvals[l] * acc
    return C


@njit(cache=True)
def apply_grid_operator(R, bvals, off, h, WA, W1, W1h, W2, W2h, eA, d1, eB, do_a, do_b):
    """Grid operators A[R] and Bt[R] with combined time weights.

    Weights are indexed by the slice lag lam = k - k' (k' >= 1 the source
    slice) and by the kernel offset. ``WA[lam, e]`` acts on sub-diagonal
    masses, ``W1[lam, d + D]`` / ``W2[lam, e]`` on the iterate itself;
    ``*h`` are the half-hat weights at a = m.
    """
    K, nm, nx = R.shape
    D = (W1.shape[1] - 1) // 2
    outA = np.zeros((K, nm, nx))
    outB = np.zeros((K, nm, nx))
    C = cumulative_below(R, bvals, off)
    for k in range(1, K):
        for lam in range(0, k):
            kp = k - lam
            ea = eA[lam]
            dd = d1[lam]
            eb = eB[lam]
            for j in range(nm):
                J = j + off
                for i in range(J + 1):
                    if do_a:
                        acc = 0.0
                        lmin = 2 * J - i - ea
                        if lmin < 0:
                            lmin = 0
                        for l in range(lmin, J):
                            acc += WA[lam, 2 * J - i - l] * C[kp, j, l]
                        outA[k, j, i] += h * acc
                    if do_b:
                        acc = 0.0
                        # term with phi(x - a): d = i - l within [-dd, dd]
                        lmin = i - dd
                        if lmin < 0:
                            lmin = 0
                        lmax = i + dd
                        if lmax > J - 1:
                            lmax = J - 1
                        for l in range(lmin, lmax + 1):
                            acc += W1[lam, i - l + D] * bvals[l] * R[kp, j, l]
                        if J - i <= dd:
                            acc += W1h[lam, i - J + D] * bvals[J] * R[kp, j, J]
                        # term with phi(2m - a - x): e = 2J - i - l within [0, eb]
                        lmin = 2 * J - i - eb
                        if lmin < 0:
                            lmin = 0
                        for l in range(lmin, J):
                            acc += W2[lam, 2 * J - i - l] * bvals[l] * R[kp, j, l]
                        if J - i <= eb:
                            acc += W2h[lam, J - i] * bvals[J] * R[kp, j, J]
                        outB[k, j, i] += acc
    return outA, outB


@njit(cache=True)
def chain_step(p, Pb, off, h, xn, qa, qc, sidx, sw, qw, mu1, G, dt):
    """One frozen-drift transition of the joint law over ``dt``.

    ``p`` and ``Pb`` (mass below m) have shape (nm, nx, nt). Source points in
    x^1 are ``qa`` in cell ``qc`` with weight ``qw``; values there come from
    four-point Lagrange stencils ``sidx[q, v]`` / ``sw[q, v]`` where variant
    v = 1 is shifted left for the cell touching the diagonal. ``mu1[q, r]``
    is the frozen first drift and ``G[q, r, l]`` the x~ transition from node
    r to node l with the hat integral folded in.
    """
    nm, nx, nt = p.shape
    nq = qa.shape[0]
    out = np.zeros((nm, nx, nt))
    sd = math.sqrt(dt)
    xv = np.zeros(nx)
    for j in range(nm):
        J = j + off
        m = xn[J]
        for q in range(nq):
            c = qc[q]
            if c + 1 > J:
                continue
            a = qa[q]
            v = 1 if c + 2 > J else 0
            lin = J < 3 or sidx[q, v, 0] < 0
            for r in range(nt):
                if lin:
                    u = (a - xn[c]) / h
                    pv = (1.0 - u) * p[j, c, r] + u * p[j, c + 1, r]
                    Pv = (1.0 - u) * Pb[j, c, r] + u * Pb[j, c + 1, r]
                else:
                    pv = 0.0
                    Pv = 0.0
                    for s in range(4):
                        k = sidx[q, v, s]
                        pv += sw[q, v, s] * p[j, k, r]
                        Pv += sw[q, v, s] * Pb[j, k, r]
                if pv == 0.0 and Pv == 0.0:
                    continue
                mu = mu1[q, r]
                for i in range(J + 1):
                    y = xn[i] - a
                    z = 2.0 * (m - a) - y
                    if abs(y) > 12.0 * sd + abs(mu) * dt and z > 12.0 * sd:
                        xv[i] = 0.0
                        continue
                    gir = math.exp(mu * y - 0.5 * mu * mu * dt)
                    ker = _phi(y, dt) - _phi(z, dt)
                    gm = 2.0 * z / dt * _phi(z, dt)
                    xv[i] = qw[q] * gir * (pv * ker + Pv * gm)
                for l in range(nt):
                    gl = G[q, r, l]
                    if gl == 0.0:
                        continue
                    for i in range(J + 1):
                        out[j, i, l] += xv[i] * gl
    return out
