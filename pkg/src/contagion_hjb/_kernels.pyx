# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: HJB time stepping and batched path simulation.

Every function here has a numpy twin in _fallback.py with the same
signature and the same floating-point operation order where practical.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, isfinite, fabs, INFINITY

cnp.import_array()

cdef enum:
    MAXK = 16
    MAXN = 16

cdef double PFLOOR = 1e-12


# ---------------------------------------------------------------------------
# HJB stepper


cdef inline double _trunc(double q, double g, double m) noexcept nogil:
    if m <= 0.0:
        return q * g * g
    return q * g * g / (1.0 + q * g * g / m)


cdef inline double _dtrunc(double q, double g, double m) noexcept nogil:
    cdef double d
    if m <= 0.0:
        return 2.0 * q * g
    d = 1.0 + q * g * g / m
    return 2.0 * q * g / (d * d)


cdef int _step(double[::1] v, double[::1] u, double[::1] qa, double[::1] qz,
               double kz, double[::1] theta, double[::1] rho, double[::1] cpl,
               double dt, double h, double m, double lo, double hi, int dirichlet,
               double tol, int maxit, double[::1] lo_d, double[::1] di,
               double[::1] up, double[::1] rhs, double[::1] fz, int* iters,
               int* bad) noexcept nogil:
    """Backward Euler step solved by Newton; returns 0 ok, 1 non-finite, 2 no convergence.

    The bound indicator is frozen after half the iteration budget so that
    a node sitting on a bound cannot make Newton cycle.
    """
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t k
    cdef int it
    cdef double g, s, ind, a, ex, r, mx, fac, e0, fl, tmp
    cdef double ih = 1.0 / h, ih2 = 1.0 / (h * h)
    for k in range(n):
        u[k] = v[k]
    for it in range(maxit):
        # assemble residual (rhs = -R) and Jacobian bands
        for k in range(n):
            if k == 0:
                g = (-3.0 * u[0] + 4.0 * u[1] - u[2]) * 0.5 * ih
            elif k == n - 1:
                g = (3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]) * 0.5 * ih
            else:
                g = (u[k + 1] - u[k - 1]) * 0.5 * ih
            if 2 * it < maxit:
                ind = 1.0
                if u[k] < lo or u[k] > hi:
                    ind = 0.0
                fz[k] = ind
            else:
                ind = fz[k]
            ex = cpl[k] * exp(-u[k])
            s = ind * (0.5 * _dtrunc(qa[k], g, m) + kz * _dtrunc(qz[k], g, m)) + theta[k]
            r = ind * (0.5 * _trunc(qa[k], g, m) + kz * _trunc(qz[k], g, m)) + theta[k] * g + ex + rho[k]
            if k == 0 or k == n - 1:
                if dirichlet:
                    rhs[k] = -u[k]
                    di[k] = 1.0
                    lo_d[k] = 0.0
                    up[k] = 0.0
                    continue
                rhs[k] = -(u[k] - v[k] - dt * r)
                if k == 0:
                    di[0] = 1.0 + dt * s * 1.5 * ih + dt * ex
                    up[0] = -dt * s * 2.0 * ih
                    lo_d[0] = dt * s * 0.5 * ih      # entry (0, 2)
                else:
                    di[k] = 1.0 - dt * s * 1.5 * ih + dt * ex
                    lo_d[k] = dt * s * 2.0 * ih      # entry (n-1, n-2)
                    up[k] = -dt * s * 0.5 * ih       # entry (n-1, n-3)
            else:
                a = 0.5 * qa[k]
                r = r + a * (u[k + 1] - 2.0 * u[k] + u[k - 1]) * ih2
                rhs[k] = -(u[k] - v[k] - dt * r)
                di[k] = 1.0 + 2.0 * dt * a * ih2 + dt * ex
                lo_d[k] = -dt * (a * ih2 - 0.5 * s * ih)
                up[k] = -dt * (a * ih2 + 0.5 * s * ih)
        # forward elimination; row 0 has an extra entry e0 at column 2 and
        # row n-1 an extra entry fl at column n-3
        e0 = lo_d[0]
        fl = up[n - 1]
        tmp = lo_d[n - 1]
        fac = lo_d[1] / di[0]
        di[1] -= fac * up[0]
        up[1] -= fac * e0
        rhs[1] -= fac * rhs[0]
        for k in range(2, n - 1):
            fac = lo_d[k] / di[k - 1]
            di[k] -= fac * up[k - 1]
            rhs[k] -= fac * rhs[k - 1]
        fac = fl / di[n - 3]
        tmp -= fac * up[n - 3]
        rhs[n - 1] -= fac * rhs[n - 3]
        fac = tmp / di[n - 2]
        di[n - 1] -= fac * up[n - 2]
        rhs[n - 1] -= fac * rhs[n - 2]
        # back substitution
        rhs[n - 1] = rhs[n - 1] / di[n - 1]
        for k in range(n - 2, 0, -1):
            rhs[k] = (rhs[k] - up[k] * rhs[k + 1]) / di[k]
        rhs[0] = (rhs[0] - up[0] * rhs[1] - e0 * rhs[2]) / di[0]
        mx = 0.0
        for k in range(n):
            u[k] += rhs[k]
            if not isfinite(u[k]):
                bad[0] = <int>k
                iters[0] = it + 1
                return 1
            if fabs(rhs[k]) > mx:
                mx = fabs(rhs[k])
        if mx < tol:
            iters[0] = it + 1
            return 0
    iters[0] = maxit
    bad[0] = -1
    return 2


def hjb_step(double[::1] v, double[::1] qa, double[::1] qz, double kz,
             double[::1] theta, double[::1] rho, double[::1] cpl, double dt,
             double h, double m, double lo, double hi, int dirichlet,
             double tol, int maxit):
    cdef Py_ssize_t n = v.shape[0]
    u = np.empty(n)
    w1 = np.empty(n); w2 = np.empty(n); w3 = np.empty(n); w4 = np.empty(n); w5 = np.empty(n)
    cdef int iters = 0, bad = -1, st
    st = _step(v, u, qa, qz, kz, theta, rho, cpl, dt, h, m, lo, hi, dirichlet,
               tol, maxit, w1, w2, w3, w4, w5, &iters, &bad)
    return u, st, bad, iters


def hjb_backward(double[::1] qa, double[::1] qz, double kz, double[::1] theta,
                 double[::1] rho, double[:, ::1] cpl, double dt, double h,
                 double m, double lo0, double hi0, int dirichlet, double tol,
                 int maxit):
    """Solve all levels from t=T (row n_time-1, zero) back to t=0 (row 0).

    Bounds at level j are (tau+1)*lo0 and (tau+1)*hi0 with tau = T - t_j.
    Returns (W, status, level, node, max_iters).
    """
    cdef Py_ssize_t nt = cpl.shape[0], n = cpl.shape[1]
    W = np.zeros((nt, n))
    cdef double[:, ::1] w = W
    w1 = np.empty(n); w2 = np.empty(n); w3 = np.empty(n); w4 = np.empty(n); w5 = np.empty(n)
    cdef double[::1] a1 = w1, a2 = w2, a3 = w3, a4 = w4, a5 = w5
    cdef Py_ssize_t j
    cdef int iters = 0, bad = -1, st = 0, mxit = 0
    cdef double tau, lo, hi
    with nogil:
        for j in range(nt - 2, -1, -1):
            tau = (nt - 1 - j) * dt
            lo = (tau + 1.0) * lo0
            hi = (tau + 1.0) * hi0
            st = _step(w[j + 1], w[j], qa, qz, kz, theta, rho, cpl[j], dt, h, m,
                       lo, hi, dirichlet, tol, maxit, a1, a2, a3, a4, a5, &iters, &bad)
            if iters > mxit:
                mxit = iters
            if st != 0:
                break
    if st != 0:
        return W, st, j, bad, mxit
    return W, 0, -1, -1, mxit


# ---------------------------------------------------------------------------
# path simulation helpers


ctypedef struct Tab:
    int N, K, S
    double* mu      # (N, K, S)
    double* h       # (N, K, S)
    double* bh      # (N, K, S)
    double* vol     # (N, S)
    double* gen     # (K, K)
    double r, gamma
    int kind
    double scale
    double* cpi     # (N,)
    double* grad    # (S, nt, nl)
    Py_ssize_t nt, nl
    double gdt, gdl


cdef inline double _at(double* a, Tab* T, int i, int k, int z) noexcept nogil:
    return a[(i * T.K + k) * T.S + z]


cdef Tab _tab(double[:, :, ::1] mu, double[:, :, ::1] h, double[:, :, ::1] bh,
              double[:, ::1] vol, double[:, ::1] gen, double r, double gamma,
              int kind, double scale, double[::1] cpi, double[:, :, ::1] grad,
              double gdt, double gdl):
    cdef Tab T
    T.N = mu.shape[0]
    T.K = mu.shape[1]
    T.S = mu.shape[2]
    if T.N > MAXN or T.K > MAXK:
        raise ValueError("too many stocks or regimes for the compiled kernels")
    T.mu = &mu[0, 0, 0]
    T.h = &h[0, 0, 0]
    T.bh = &bh[0, 0, 0]
    T.vol = &vol[0, 0]
    T.gen = &gen[0, 0]
    T.r = r
    T.gamma = gamma
    T.kind = kind
    T.scale = scale
    T.cpi = &cpi[0]
    T.grad = &grad[0, 0, 0]
    T.nt = grad.shape[1]
    T.nl = grad.shape[2]
    T.gdt = gdt
    T.gdl = gdl
    return T


cdef inline double _interp_grad(Tab* T, int s, double t, double lam) noexcept nogil:
    cdef Py_ssize_t nt = T.nt, nl = T.nl, j0, m0
    cdef double ti = t / T.gdt, li = lam / T.gdl, wt, wl
    cdef double* g = T.grad + s * nt * nl
    if ti < 0.0:
        ti = 0.0
    if li < 0.0:
        li = 0.0
    j0 = <Py_ssize_t>ti
    if j0 > nt - 2:
        j0 = nt - 2
    m0 = <Py_ssize_t>li
    if m0 > nl - 2:
        m0 = nl - 2
    wt = ti - j0
    wl = li - m0
    if wt > 1.0:
        wt = 1.0
    if wl > 1.0:
        wl = 1.0
    return ((1.0 - wl) * ((1.0 - wt) * g[j0 * nl + m0] + wt * g[(j0 + 1) * nl + m0])
            + wl * ((1.0 - wt) * g[j0 * nl + m0 + 1] + wt * g[(j0 + 1) * nl + m0 + 1]))


cdef inline void _strategy(Tab* T, double t, double* p, int z, double* pi) noexcept nogil:
    cdef int i
    cdef double lam, g, dmu, gam, bt, v
    if T.kind == 1:
        for i in range(T.N):
            pi[i] = 0.0 if (z >> i) & 1 else T.cpi[i]
        return
    # optimal feedback, K = 2
    lam = p[0]
    g = _interp_grad(T, z, t, lam)
    for i in range(T.N):
        if (z >> i) & 1:
            pi[i] = 0.0
            continue
        v = T.vol[i * T.S + z]
        dmu = _at(T.mu, T, i, 0, z) - _at(T.mu, T, i, 1, z)
        bt = _at(T.bh, T, i, 1, z) + (_at(T.bh, T, i, 0, z) - _at(T.bh, T, i, 1, z)) * lam
        gam = T.r - bt
        pi[i] = T.scale / (1.0 - T.gamma) * (lam * (1.0 - lam) * dmu * g - gam) / (v * v)


cdef inline int _project(double* p, int K, double exit_tol) noexcept nogil:
    cdef int k
    cdef double s = 0.0
    for k in range(K):
        if p[k] < -exit_tol or p[k] > 1.0 + exit_tol or not isfinite(p[k]):
            return 1
        if p[k] < PFLOOR:
            p[k] = PFLOOR
        s += p[k]
    for k in range(K):
        p[k] = p[k] / s
    return 0


cdef inline int _hazard(double* cum, double* th, double* haz, int z, int N,
                        double dt, double* frac) noexcept nogil:
    """Advance cumulative hazards; return the earliest stock to cross or -1."""
    cdef int i, first = -1
    cdef double f, fbest = 2.0
    for i in range(N):
        if (z >> i) & 1:
            continue
        if cum[i] + haz[i] * dt >= th[i]:
            f = (th[i] - cum[i]) / (haz[i] * dt)
            if f < fbest:
                fbest = f
                first = i
    frac[0] = fbest
    if first < 0:
        for i in range(N):
            if not (z >> i) & 1:
                cum[i] += haz[i] * dt
    else:
        for i in range(N):
            if not (z >> i) & 1:
                cum[i] += haz[i] * dt * fbest
    return first


cdef inline void _filter_step(Tab* T, double* p, double* dy, int z, double dt,
                              int milstein) noexcept nogil:
    """Euler (+ Milstein) step of the normalized filter between distress events."""
    cdef int N = T.N, K = T.K
    cdef double muh[MAXN]
    cdef double hh[MAXN]
    cdef double v2[MAXN]
    cdef double c[MAXK][MAXN]
    cdef double a[MAXK]
    cdef double qv[MAXK]
    cdef double newp[MAXK]
    cdef int i, k, l
    cdef double s, abar, qbar
    for i in range(N):
        muh[i] = 0.0
        hh[i] = 0.0
        v2[i] = T.vol[i * T.S + z] * T.vol[i * T.S + z]
        for k in range(K):
            muh[i] += p[k] * _at(T.mu, T, i, k, z)
            hh[i] += p[k] * _at(T.h, T, i, k, z)
    abar = 0.0
    qbar = 0.0
    for k in range(K):
        a[k] = 0.0
        qv[k] = 0.0
        for i in range(N):
            c[k][i] = (_at(T.mu, T, i, k, z) - muh[i]) / v2[i]
            a[k] += c[k][i] * (dy[i] - muh[i] * dt)
            qv[k] += c[k][i] * c[k][i] * v2[i]
        abar += p[k] * a[k] * a[k]
        qbar += p[k] * qv[k]
    for k in range(K):
        s = 0.0
        for l in range(K):
            s += T.gen[l * K + k] * p[l]
        for i in range(N):
            if not (z >> i) & 1:
                s += -p[k] * (_at(T.h, T, i, k, z) - hh[i])
        newp[k] = p[k] + s * dt + p[k] * a[k]
        if milstein:
            newp[k] += 0.5 * p[k] * (a[k] * a[k] - qv[k] * dt - abar + qbar * dt)
    for k in range(K):
        p[k] = newp[k]


cdef inline void _revise(Tab* T, double* p, int i, int z) noexcept nogil:
    cdef int k
    cdef double s = 0.0
    for k in range(T.K):
        s += p[k] * _at(T.h, T, i, k, z)
    for k in range(T.K):
        p[k] = p[k] * _at(T.h, T, i, k, z) / s


ctypedef struct Two:
    # per (stock, state) constants for the two-regime fast path, index i * S + z
    double* dmu     # mu(e1) - mu(e2)
    double* mu2
    double* dh      # h(e1) - h(e2)
    double* h2
    double* dbh     # (b + h)(e1) - (b + h)(e2)
    double* bh2
    double* vol
    double* coef    # 1 / ((1 - gamma) vol^2)
    double g10, g01  # rates 1 -> 2 and 2 -> 1


cdef object _two_tables(Tab* T):
    cdef int N = T.N, S = T.S, i, z
    out = np.zeros((8, N, S))
    cdef double[:, :, ::1] o = out
    for i in range(N):
        for z in range(S):
            o[0, i, z] = _at(T.mu, T, i, 0, z) - _at(T.mu, T, i, 1, z)
            o[1, i, z] = _at(T.mu, T, i, 1, z)
            o[2, i, z] = _at(T.h, T, i, 0, z) - _at(T.h, T, i, 1, z)
            o[3, i, z] = _at(T.h, T, i, 1, z)
            o[4, i, z] = _at(T.bh, T, i, 0, z) - _at(T.bh, T, i, 1, z)
            o[5, i, z] = _at(T.bh, T, i, 1, z)
            o[6, i, z] = T.vol[i * S + z]
            o[7, i, z] = 1.0 / ((1.0 - T.gamma) * T.vol[i * S + z] * T.vol[i * S + z])
    return out


cdef Two _two(double[:, :, ::1] o, Tab* T):
    cdef Two W
    W.dmu = &o[0, 0, 0]
    W.mu2 = &o[1, 0, 0]
    W.dh = &o[2, 0, 0]
    W.h2 = &o[3, 0, 0]
    W.dbh = &o[4, 0, 0]
    W.bh2 = &o[5, 0, 0]
    W.vol = &o[6, 0, 0]
    W.coef = &o[7, 0, 0]
    W.g10 = T.gen[1]
    W.g01 = T.gen[2]
    return W


cdef inline void _strategy2(Tab* T, Two* W, double t, double lam, int z, double* pi) noexcept nogil:
    cdef int i, q
    cdef double g, lg
    if T.kind == 1:
        for i in range(T.N):
            pi[i] = 0.0 if (z >> i) & 1 else T.cpi[i]
        return
    g = _interp_grad(T, z, t, lam)
    lg = lam * (1.0 - lam) * g
    for i in range(T.N):
        if (z >> i) & 1:
            pi[i] = 0.0
            continue
        q = i * T.S + z
        pi[i] = T.scale * W.coef[q] * (lg * W.dmu[q] - T.r + W.bh2[q] + W.dbh[q] * lam)


cdef inline int _project2(double* lam, double exit_tol) noexcept nogil:
    if lam[0] < -exit_tol or lam[0] > 1.0 + exit_tol or not isfinite(lam[0]):
        return 1
    if lam[0] < PFLOOR:
        lam[0] = PFLOOR
    elif lam[0] > 1.0 - PFLOOR:
        lam[0] = 1.0 - PFLOOR
    return 0


cdef inline double _revise2(Two* W, double lam, int i, int z, int S) noexcept nogil:
    cdef int q = i * S + z
    cdef double h1 = W.h2[q] + W.dh[q]
    return lam * h1 / (lam * h1 + (1.0 - lam) * W.h2[q])


cdef void _tildeP_two(Tab* T, double[:, :, ::1] normals, double[:, ::1] thetas,
                      double lam0, int z0, double dt, int comp, double exit_tol,
                      double[::1] acc, long long[::1] zz, long long[::1] st,
                      double[::1] lamv, double[:, ::1] Cm, Two* W) noexcept nogil:
    cdef Py_ssize_t B = normals.shape[0], n = normals.shape[1], b, j
    cdef int N = T.N, S = T.S, i, q, z, hit
    cdef double t, lam, lo, eta, dr, nz, sq = sqrt(dt), frac, r = T.r, gm = T.gamma
    cdef double pi[MAXN]
    cdef double ht[MAXN]
    cdef double* nrm
    for j in range(n):
        t = j * dt
        for b in range(B):
            if st[b]:
                continue
            z = <int>zz[b]
            lam = lamv[b]
            lo = lam * (1.0 - lam)
            nrm = &normals[b, j, 0]
            _strategy2(T, W, t, lam, z, pi)
            eta = -r
            dr = W.g01 - (W.g01 + W.g10) * lam
            nz = 0.0
            for i in range(N):
                q = i * S + z
                ht[i] = W.h2[q] + W.dh[q] * lam
                eta += pi[i] * (r - W.bh2[q] - W.dbh[q] * lam) + 0.5 * (1.0 - gm) * pi[i] * pi[i] * W.vol[q] * W.vol[q]
                dr += gm * lo * W.dmu[q] * pi[i]
                if comp and not (z >> i) & 1:
                    dr -= lo * W.dh[q]
                nz += lo * W.dmu[q] / W.vol[q] * nrm[i]
            acc[b] += eta * dt
            hit = _hazard(&Cm[b, 0], &thetas[b, 0], ht, z, N, dt, &frac)
            lam = lam + dr * dt + nz * sq
            if _project2(&lam, exit_tol):
                st[b] = 1
                continue
            if hit >= 0:
                lam = _revise2(W, lam, hit, z, S)
                zz[b] = z | (1 << hit)
            lamv[b] = lam


cdef inline double _two_increment(Two* W, double lam, double* dy, int z, int N, int S,
                                  double dt, int milstein) noexcept nogil:
    """Filter step for p_1 = lambda; same scheme as _filter_step with K = 2."""
    cdef int i, q
    cdef double lo = lam * (1.0 - lam), A = 0.0, M = 0.0, Q = 0.0, dr, c, out
    dr = W.g01 - (W.g01 + W.g10) * lam
    for i in range(N):
        q = i * S + z
        c = W.dmu[q] / (W.vol[q] * W.vol[q])
        A += c * dy[i]
        M += c * (W.mu2[q] + W.dmu[q] * lam)
        Q += c * W.dmu[q]
        if not (z >> i) & 1:
            dr -= lo * W.dh[q]
    A -= M * dt  # innovation
    out = dr * dt + lo * A
    if milstein:
        out += 0.5 * lo * (1.0 - 2.0 * lam) * (A * A - Q * dt)
    return out


cdef void _physical_two(Tab* T, double[:, :, ::1] normals, double[:, ::1] thetas,
                        long long[:, ::1] regimes, double dt, int milstein,
                        double exit_tol, double[::1] lv, long long[::1] zz,
                        long long[::1] st, double[::1] lamv, double[:, ::1] Cm,
                        Two* W) noexcept nogil:
    cdef Py_ssize_t B = normals.shape[0], n = normals.shape[1], b, j
    cdef int N = T.N, S = T.S, i, q, z, x, hit
    cdef double t, lam, dw, v, sq = sqrt(dt), frac, r = T.r
    cdef double pi[MAXN]
    cdef double haz[MAXN]
    cdef double dy[MAXN]
    cdef double* nrm
    for j in range(n):
        t = j * dt
        for b in range(B):
            if st[b]:
                continue
            z = <int>zz[b]
            x = <int>regimes[b, j]
            lam = lamv[b]
            nrm = &normals[b, j, 0]
            _strategy2(T, W, t, lam, z, pi)
            lv[b] += r * dt
            for i in range(N):
                v = W.vol[i * S + z]
                dw = sq * nrm[i]
                lv[b] += (pi[i] * (_at(T.bh, T, i, x, z) - r) - 0.5 * pi[i] * pi[i] * v * v) * dt + pi[i] * v * dw
                dy[i] = _at(T.mu, T, i, x, z) * dt + v * dw
                haz[i] = _at(T.h, T, i, x, z)
            hit = _hazard(&Cm[b, 0], &thetas[b, 0], haz, z, N, dt, &frac)
            lam = lam + _two_increment(W, lam, dy, z, N, S, dt, milstein)
            if _project2(&lam, exit_tol):
                st[b] = 1
                continue
            if hit >= 0:
                lam = _revise2(W, lam, hit, z, S)
                zz[b] = z | (1 << hit)
            lamv[b] = lam


# ---------------------------------------------------------------------------
# batched simulators


def tildeP_batch(double[:, :, ::1] normals, double[:, ::1] thetas, double[::1] p0,
                 int z0, double dt, int comp, double[:, :, ::1] mu,
                 double[:, :, ::1] h, double[:, :, ::1] bh, double[:, ::1] vol,
                 double[:, ::1] gen, double r, double gamma, int kind, double scale,
                 double[::1] cpi, double[:, :, ::1] grad, double gdt, double gdl,
                 double exit_tol):
    """Controlled filter under the reference measure; returns (int eta, final z, status).

    The whole batch advances one time step at a time so that every path reads
    the same rows of the gradient table while they are in cache.
    """
    cdef Py_ssize_t B = normals.shape[0], n = normals.shape[1]
    cdef int N = normals.shape[2], K = p0.shape[0]
    cdef Tab T = _tab(mu, h, bh, vol, gen, r, gamma, kind, scale, cpi, grad, gdt, gdl)
    integ = np.zeros(B)
    zfin = np.full(B, z0, dtype=np.int64)
    status = np.zeros(B, dtype=np.int64)
    cdef double[::1] acc = integ
    cdef long long[::1] zz = zfin
    cdef long long[::1] st = status
    cdef double[:, ::1] Pm = np.tile(np.asarray(p0), (B, 1))
    cdef double[:, ::1] Cm = np.zeros((B, N))
    cdef double q[MAXK]
    cdef double pi[MAXN]
    cdef double ht[MAXN]
    cdef double muh[MAXN]
    cdef Py_ssize_t b, j
    cdef int i, k, l, z, hit, S = T.S
    cdef double t, eta, sq = sqrt(dt), drift, noise, bt, v, frac
    cdef double* nrm
    cdef double* p
    cdef double[::1] lamv
    cdef Two W
    if K == 2:
        two = _two_tables(&T)
        W = _two(two, &T)
        lamv = np.full(B, p0[0])
        with nogil:
            _tildeP_two(&T, normals, thetas, p0[0], z0, dt, comp, exit_tol, acc, zz, st, lamv, Cm, &W)
        return integ, zfin, status
    with nogil:
        for j in range(n):
            t = j * dt
            for b in range(B):
                if st[b]:
                    continue
                z = <int>zz[b]
                p = &Pm[b, 0]
                nrm = &normals[b, j, 0]
                _strategy(&T, t, p, z, pi)
                eta = -r
                for i in range(N):
                    bt = 0.0
                    ht[i] = 0.0
                    muh[i] = 0.0
                    for k in range(K):
                        bt += p[k] * _at(T.bh, &T, i, k, z)
                        ht[i] += p[k] * _at(T.h, &T, i, k, z)
                        muh[i] += p[k] * _at(T.mu, &T, i, k, z)
                    v = T.vol[i * S + z]
                    eta += pi[i] * (r - bt) + 0.5 * (1.0 - gamma) * pi[i] * pi[i] * v * v
                acc[b] += eta * dt
                hit = _hazard(&Cm[b, 0], &thetas[b, 0], ht, z, N, dt, &frac)
                for k in range(K):
                    drift = 0.0
                    for l in range(K):
                        drift += T.gen[l * K + k] * p[l]
                    noise = 0.0
                    for i in range(N):
                        v = T.vol[i * S + z]
                        drift += gamma * p[k] * (_at(T.mu, &T, i, k, z) - muh[i]) * pi[i]
                        if comp and not (z >> i) & 1:
                            drift -= p[k] * (_at(T.h, &T, i, k, z) - ht[i])
                        noise += p[k] * (_at(T.mu, &T, i, k, z) - muh[i]) / v * nrm[i]
                    q[k] = p[k] + drift * dt + noise * sq
                for k in range(K):
                    p[k] = q[k]
                if _project(p, K, exit_tol):
                    st[b] = 1
                    continue
                if hit >= 0:
                    _revise(&T, p, hit, z)
                    zz[b] = z | (1 << hit)
    return integ, zfin, status


def physical_batch(double[:, :, ::1] normals, double[:, ::1] thetas,
                   long long[:, ::1] regimes, double[::1] p0, int z0, double dt,
                   double[:, :, ::1] mu, double[:, :, ::1] h, double[:, :, ::1] bh,
                   double[:, ::1] vol, double[:, ::1] gen, double r, double gamma,
                   int kind, double scale, double[::1] cpi, double[:, :, ::1] grad,
                   double gdt, double gdl, double exit_tol, int milstein):
    """Truth + filter + wealth; returns (log V_T/v, filter p_T, final z, status)."""
    cdef Py_ssize_t B = normals.shape[0], n = normals.shape[1]
    cdef int N = normals.shape[2], K = p0.shape[0]
    cdef Tab T = _tab(mu, h, bh, vol, gen, r, gamma, kind, scale, cpi, grad, gdt, gdl)
    logv = np.zeros(B)
    pT = np.tile(np.asarray(p0), (B, 1))
    zfin = np.full(B, z0, dtype=np.int64)
    status = np.zeros(B, dtype=np.int64)
    cdef double[::1] lv = logv
    cdef double[:, ::1] Pm = pT
    cdef long long[::1] zz = zfin
    cdef long long[::1] st = status
    cdef double[:, ::1] Cm = np.zeros((B, N))
    cdef double pi[MAXN]
    cdef double haz[MAXN]
    cdef double dy[MAXN]
    cdef Py_ssize_t b, j
    cdef int i, k, z, x, hit, S = T.S
    cdef double t, sq = sqrt(dt), v, dw, frac
    cdef double* nrm
    cdef double* p
    cdef double[::1] lamv
    cdef Two W
    if K == 2:
        two = _two_tables(&T)
        W = _two(two, &T)
        lamv = np.full(B, p0[0])
        with nogil:
            _physical_two(&T, normals, thetas, regimes, dt, milstein, exit_tol, lv, zz, st, lamv, Cm, &W)
        pT[:, 0] = np.asarray(lamv)
        pT[:, 1] = 1.0 - np.asarray(lamv)
        return logv, pT, zfin, status
    with nogil:
        for j in range(n):
            t = j * dt
            for b in range(B):
                if st[b]:
                    continue
                z = <int>zz[b]
                p = &Pm[b, 0]
                x = <int>regimes[b, j]
                nrm = &normals[b, j, 0]
                _strategy(&T, t, p, z, pi)
                lv[b] += r * dt
                for i in range(N):
                    v = T.vol[i * S + z]
                    dw = sq * nrm[i]
                    lv[b] += (pi[i] * (_at(T.bh, &T, i, x, z) - r) - 0.5 * pi[i] * pi[i] * v * v) * dt + pi[i] * v * dw
                    dy[i] = _at(T.mu, &T, i, x, z) * dt + v * dw
                    haz[i] = _at(T.h, &T, i, x, z)
                hit = _hazard(&Cm[b, 0], &thetas[b, 0], haz, z, N, dt, &frac)
                _filter_step(&T, p, dy, z, dt, milstein)
                if _project(p, K, exit_tol):
                    st[b] = 1
                    continue
                if hit >= 0:
                    _revise(&T, p, hit, z)
                    zz[b] = z | (1 << hit)
    return logv, pT, zfin, status


def truth_batch(double[:, :, ::1] normals, double[:, ::1] thetas,
                long long[:, ::1] regimes, int z0, double dt, double[:, :, ::1] mu,
                double[:, :, ::1] h, double[:, ::1] vol):
    """Log-price increments, distress step and distress time per stock."""
    cdef Py_ssize_t B = normals.shape[0], n = normals.shape[1]
    cdef int N = normals.shape[2]
    dY = np.zeros((B, n, N))
    dstep = np.full((B, N), -1, dtype=np.int64)
    tau = np.full((B, N), np.inf)
    cdef double[:, :, ::1] DY = dY
    cdef long long[:, ::1] DS = dstep
    cdef double[:, ::1] TAU = tau
    cdef double haz[MAXN]
    cdef double cum[MAXN]
    cdef Py_ssize_t b, j
    cdef int i, z, x, hit
    cdef double sq = sqrt(dt), frac
    if N > MAXN:
        raise ValueError("too many stocks for the compiled kernels")
    with nogil:
        for b in range(B):
            z = z0
            for i in range(N):
                cum[i] = 0.0
            for j in range(n):
                x = <int>regimes[b, j]
                for i in range(N):
                    DY[b, j, i] = mu[i, x, z] * dt + vol[i, z] * sq * normals[b, j, i]
                    haz[i] = h[i, x, z]
                hit = _hazard(cum, &thetas[b, 0], haz, z, N, dt, &frac)
                if hit >= 0:
                    DS[b, hit] = j
                    TAU[b, hit] = (j + frac) * dt
                    z = z | (1 << hit)
    return dY, dstep, tau


def filter_path(double[:, ::1] dY, long long[::1] dstep, double[::1] p0, int z0,
                double dt, double[:, :, ::1] mu, double[:, :, ::1] h,
                double[:, ::1] vol, double[:, ::1] gen, double exit_tol,
                int milstein):
    """Filter along one observed path; returns (P, status, failing step)."""
    cdef Py_ssize_t n = dY.shape[0]
    cdef int N = dY.shape[1], K = p0.shape[0]
    cdef double[::1] dummy1 = np.zeros(1)
    cdef double[:, :, ::1] dummy3 = np.zeros((1, 2, 2))
    cdef Tab T = _tab(mu, h, mu, vol, gen, 0.0, 0.5, 1, 0.0, dummy1, dummy3, 1.0, 1.0)
    P = np.zeros((n + 1, K))
    cdef double[:, ::1] PP = P
    cdef double p[MAXK]
    cdef double dy[MAXN]
    cdef Py_ssize_t j
    cdef int i, k, z = z0, hit, failed = 0
    for k in range(K):
        p[k] = p0[k]
        PP[0, k] = p[k]
    with nogil:
        for j in range(n):
            for i in range(N):
                dy[i] = dY[j, i]
            _filter_step(&T, p, dy, z, dt, milstein)
            if _project(p, K, exit_tol):
                failed = 1
                break
            hit = -1
            for i in range(N):
                if dstep[i] == j:
                    hit = i
            if hit >= 0:
                _revise(&T, p, hit, z)
                z = z | (1 << hit)
            for k in range(K):
                PP[j + 1, k] = p[k]
    if failed:
        return P, 1, j
    return P, 0, -1
