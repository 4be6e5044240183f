"""Pure numpy implementations of the compiled kernels.

Signatures mirror _kernels.pyx.  The path simulators are vectorized across
the batch and loop over time steps; they additionally accept ``pi_fn`` so an
arbitrary vectorized strategy can drive them.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded

PFLOOR = 1e-12


# ---------------------------------------------------------------------------
# HJB stepper


def _trunc(q, g, m):
    if m <= 0.0:
        return q * g * g
    return q * g * g / (1.0 + q * g * g / m)


def _dtrunc(q, g, m):
    if m <= 0.0:
        return 2.0 * q * g
    d = 1.0 + q * g * g / m
    return 2.0 * q * g / (d * d)


def hjb_step(v, qa, qz, kz, theta, rho, cpl, dt, h, m, lo, hi, dirichlet, tol, maxit):
    n = v.shape[0]
    u = v.copy()
    ih, ih2 = 1.0 / h, 1.0 / (h * h)
    a = 0.5 * qa
    ind = np.ones(n)
    for it in range(maxit):
        g = np.empty(n)
        g[1:-1] = (u[2:] - u[:-2]) * 0.5 * ih
        g[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) * 0.5 * ih
        g[-1] = (3.0 * u[-1] - 4.0 * u[-2] + u[-3]) * 0.5 * ih
        if 2 * it < maxit:  # then frozen, so a node on a bound cannot cycle
            ind = np.where((u < lo) | (u > hi), 0.0, 1.0)
        ex = cpl * np.exp(-u)
        s = ind * (0.5 * _dtrunc(qa, g, m) + kz * _dtrunc(qz, g, m)) + theta
        r = ind * (0.5 * _trunc(qa, g, m) + kz * _trunc(qz, g, m)) + theta * g + ex + rho
        r[1:-1] += a[1:-1] * (u[2:] - 2.0 * u[1:-1] + u[:-2]) * ih2
        rhs = -(u - v - dt * r)

        ab = np.zeros((5, n))  # rows: super2, super1, diag, sub1, sub2
        di = 1.0 + 2.0 * dt * a * ih2 + dt * ex
        sub = -dt * (a * ih2 - 0.5 * s * ih)
        sup = -dt * (a * ih2 + 0.5 * s * ih)
        ab[2, 1:-1] = di[1:-1]
        ab[1, 2:] = sup[1:-1]
        ab[3, :-2] = sub[1:-1]
        if dirichlet:
            ab[2, 0] = ab[2, -1] = 1.0
            rhs[0] = -u[0]
            rhs[-1] = -u[-1]
        else:
            ab[2, 0] = 1.0 + dt * s[0] * 1.5 * ih + dt * ex[0]
            ab[1, 1] = -dt * s[0] * 2.0 * ih
            ab[0, 2] = dt * s[0] * 0.5 * ih
            ab[2, -1] = 1.0 - dt * s[-1] * 1.5 * ih + dt * ex[-1]
            ab[3, -2] = dt * s[-1] * 2.0 * ih
            ab[4, -3] = -dt * s[-1] * 0.5 * ih
        delta = solve_banded((2, 2), ab, rhs, check_finite=False)
        u = u + delta
        if not np.all(np.isfinite(u)):
            return u, 1, int(np.argmax(~np.isfinite(u))), it + 1
        if np.max(np.abs(delta)) < tol:
            return u, 0, -1, it + 1
    return u, 2, -1, maxit


def hjb_backward(qa, qz, kz, theta, rho, cpl, dt, h, m, lo0, hi0, dirichlet, tol, maxit):
    nt, n = cpl.shape
    W = np.zeros((nt, n))
    mxit = 0
    for j in range(nt - 2, -1, -1):
        tau = (nt - 1 - j) * dt
        u, st, bad, it = hjb_step(W[j + 1], qa, qz, kz, theta, rho, cpl[j], dt, h, m,
                                  (tau + 1.0) * lo0, (tau + 1.0) * hi0, dirichlet, tol, maxit)
        W[j] = u
        mxit = max(mxit, it)
        if st != 0:
            return W, st, j, bad, mxit
    return W, 0, -1, -1, mxit


# ---------------------------------------------------------------------------
# path simulation helpers


def _interp_grad(grad, s, t, lam, gdt, gdl):
    """Bilinear lookup in a (S, nt, nl) gradient table."""
    nt, nl = grad.shape[1], grad.shape[2]
    ti = max(t / gdt, 0.0)
    li = np.maximum(lam / gdl, 0.0)
    j0 = min(int(ti), nt - 2)
    m0 = np.minimum(li.astype(np.int64), nl - 2)
    wt = min(ti - j0, 1.0)
    wl = np.minimum(li - m0, 1.0)
    g0 = (1.0 - wt) * grad[s, j0, m0] + wt * grad[s, j0 + 1, m0]
    g1 = (1.0 - wt) * grad[s, j0, m0 + 1] + wt * grad[s, j0 + 1, m0 + 1]
    return (1.0 - wl) * g0 + wl * g1


def _live(z, N):
    return ((z[:, None] >> np.arange(N)) & 1) == 0


def table_strategy(kind, scale, cpi, grad, gdt, gdl, mu, bh, vol, r, gamma):
    """Vectorized twin of the compiled strategy evaluator."""

    def pi_fn(t, P, z):
        live = _live(z, mu.shape[0])
        if kind == 1:
            return np.where(live, cpi[None, :], 0.0)
        lam = P[:, 0]
        g = _interp_grad(grad, z, t, lam, gdt, gdl)
        v = vol[:, z].T
        dmu = (mu[:, 0, z] - mu[:, 1, z]).T
        bt = (bh[:, 1, z] + (bh[:, 0, z] - bh[:, 1, z]) * lam).T
        gam = r - bt
        pi = scale / (1.0 - gamma) * (lam[:, None] * (1.0 - lam[:, None]) * dmu * g[:, None] - gam) / (v * v)
        return np.where(live, pi, 0.0)

    return pi_fn


def _project(P, exit_tol):
    bad = np.any((P < -exit_tol) | (P > 1.0 + exit_tol) | ~np.isfinite(P), axis=1)
    P = np.maximum(P, PFLOOR)
    return P / P.sum(axis=1, keepdims=True), bad


def _hazard(cum, th, haz, z, dt):
    N = cum.shape[1]
    live = _live(z, N)
    cross = live & (cum + haz * dt >= th)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(cross, (th - cum) / (haz * dt), 2.0)
    first = np.argmin(f, axis=1)
    hit = cross.any(axis=1)
    fbest = f[np.arange(len(z)), first]
    mult = np.where(hit, fbest, 1.0)
    cum = cum + np.where(live, haz * dt * mult[:, None], 0.0)
    return cum, np.where(hit, first, -1), fbest


def _filter_step(P, dy, z, dt, mu, h, vol, gen, milstein):
    N = mu.shape[0]
    live = _live(z, N)
    muz = np.transpose(mu[:, :, z], (2, 0, 1))  # (B, N, K)
    hz = np.transpose(h[:, :, z], (2, 0, 1))
    v2 = (vol[:, z].T) ** 2  # (B, N)
    muh = np.einsum("bnk,bk->bn", muz, P)
    hh = np.einsum("bnk,bk->bn", hz, P)
    c = (muz - muh[:, :, None]) / v2[:, :, None]  # (B, N, K)
    a = np.einsum("bnk,bn->bk", c, dy - muh * dt)  # innovation per regime
    qv = np.einsum("bnk,bn->bk", c * c, v2)
    abar = (P * a * a).sum(axis=1)
    qbar = (P * qv).sum(axis=1)
    s = P @ gen
    s = s - P * np.einsum("bnk,bn->bk", hz - hh[:, :, None], live.astype(float))
    new = P + s * dt + P * a
    if milstein:
        new = new + 0.5 * P * (a * a - qv * dt - abar[:, None] + qbar[:, None] * dt)
    return new


def _revise(P, hit, z, h):
    rows = np.nonzero(hit >= 0)[0]
    if rows.size == 0:
        return P, z
    P = P.copy()
    i = hit[rows]
    hk = h[i, :, z[rows]]  # (R, K)
    q = P[rows] * hk
    P[rows] = q / q.sum(axis=1, keepdims=True)
    z = z.copy()
    z[rows] = z[rows] | (1 << i)
    return P, z


# ---------------------------------------------------------------------------
# batched simulators


def tildeP_batch(normals, thetas, p0, z0, dt, comp, mu, h, bh, vol, gen, r, gamma,
                 kind, scale, cpi, grad, gdt, gdl, exit_tol, pi_fn=None, record=None):
    B, n, N = normals.shape
    K = p0.shape[0]
    if pi_fn is None:
        pi_fn = table_strategy(kind, scale, cpi, grad, gdt, gdl, mu, bh, vol, r, gamma)
    P = np.tile(p0, (B, 1)).astype(float)
    z = np.full(B, z0, dtype=np.int64)
    acc = np.zeros(B)
    cum = np.zeros((B, N))
    status = np.zeros(B, dtype=np.int64)
    sq = np.sqrt(dt)
    for j in range(n):
        t = j * dt
        if record is not None:
            record(j, P, z)
        pi = pi_fn(t, P, z)
        muz = np.transpose(mu[:, :, z], (2, 0, 1))
        hz = np.transpose(h[:, :, z], (2, 0, 1))
        bhz = np.transpose(bh[:, :, z], (2, 0, 1))
        v = vol[:, z].T
        bt = np.einsum("bnk,bk->bn", bhz, P)
        ht = np.einsum("bnk,bk->bn", hz, P)
        muh = np.einsum("bnk,bk->bn", muz, P)
        eta = -r + (pi * (r - bt) + 0.5 * (1.0 - gamma) * pi * pi * v * v).sum(axis=1)
        acc = acc + eta * dt
        cum, hit, _ = _hazard(cum, thetas, ht, z, dt)
        dev = muz - muh[:, :, None]  # (B, N, K)
        drift = P @ gen + gamma * P * np.einsum("bnk,bn->bk", dev, pi)
        if comp:
            live = _live(z, N).astype(float)
            drift = drift - P * np.einsum("bnk,bn->bk", hz - ht[:, :, None], live)
        noise = P * np.einsum("bnk,bn->bk", dev / v[:, :, None], normals[:, j, :])
        P = P + drift * dt + noise * sq
        P, bad = _project(P, exit_tol)
        status[bad] = 1
        P, z = _revise(P, hit, z, h)
    if record is not None:
        record(n, P, z)
    return acc, z, status


def physical_batch(normals, thetas, regimes, p0, z0, dt, mu, h, bh, vol, gen, r, gamma,
                   kind, scale, cpi, grad, gdt, gdl, exit_tol, milstein, pi_fn=None):
    B, n, N = normals.shape
    K = p0.shape[0]
    if pi_fn is None:
        pi_fn = table_strategy(kind, scale, cpi, grad, gdt, gdl, mu, bh, vol, r, gamma)
    P = np.tile(p0, (B, 1)).astype(float)
    z = np.full(B, z0, dtype=np.int64)
    lv = np.zeros(B)
    cum = np.zeros((B, N))
    status = np.zeros(B, dtype=np.int64)
    sq = np.sqrt(dt)
    for j in range(n):
        t = j * dt
        x = regimes[:, j]
        pi = pi_fn(t, P, z)
        v = vol[:, z].T
        dw = sq * normals[:, j, :]
        bhx = bh[:, x, z].T
        lv = lv + r * dt + ((pi * (bhx - r) - 0.5 * pi * pi * v * v) * dt + pi * v * dw).sum(axis=1)
        dy = mu[:, x, z].T * dt + v * dw
        haz = h[:, x, z].T
        cum, hit, _ = _hazard(cum, thetas, haz, z, dt)
        P = _filter_step(P, dy, z, dt, mu, h, vol, gen, milstein)
        P, bad = _project(P, exit_tol)
        status[bad] = 1
        P, z = _revise(P, hit, z, h)
    return lv, P, z, status


def truth_batch(normals, thetas, regimes, z0, dt, mu, h, vol):
    B, n, N = normals.shape
    z = np.full(B, z0, dtype=np.int64)
    cum = np.zeros((B, N))
    dY = np.zeros((B, n, N))
    dstep = np.full((B, N), -1, dtype=np.int64)
    tau = np.full((B, N), np.inf)
    sq = np.sqrt(dt)
    for j in range(n):
        x = regimes[:, j]
        dY[:, j, :] = mu[:, x, z].T * dt + vol[:, z].T * sq * normals[:, j, :]
        haz = h[:, x, z].T
        cum, hit, frac = _hazard(cum, thetas, haz, z, dt)
        rows = np.nonzero(hit >= 0)[0]
        if rows.size:
            dstep[rows, hit[rows]] = j
            tau[rows, hit[rows]] = (j + frac[rows]) * dt
            z[rows] = z[rows] | (1 << hit[rows])
    return dY, dstep, tau


def filter_path(dY, dstep, p0, z0, dt, mu, h, vol, gen, exit_tol, milstein):
    n, N = dY.shape
    K = p0.shape[0]
    out = np.zeros((n + 1, K))
    P = p0[None, :].astype(float).copy()
    z = np.array([z0], dtype=np.int64)
    out[0] = P[0]
    for j in range(n):
        P = _filter_step(P, dY[j][None, :], z, dt, mu, h, vol, gen, milstein)
        P, bad = _project(P, exit_tol)
        if bad[0]:
            return out, 1, j
        hits = np.nonzero(dstep == j)[0]
        hit = np.array([hits[-1] if hits.size else -1])
        P, z = _revise(P, hit, z, h)
        out[j + 1] = P[0]
    return out, 0, -1
