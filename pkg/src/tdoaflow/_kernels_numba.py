"""Numba-compiled versions of the hot kernels (serial, cached).

Mirrors :mod:`tdoaflow._kernels_numpy` argument for argument.
"""

import math

import numpy as np
from numba import njit

EDH, LEDH, GROMOV = 0, 1, 2
OK, BAD_GEOMETRY, NON_FINITE, NON_PD, STIFF = 0, 1, 2, 3, 4

_LOG2PI = math.log(2.0 * math.pi)
_RX_EPS = 1e-6


@njit(cache=True)
def _rd_grad(x0, x1, x2, qa, qb, g):
    a0 = x0 - qa[0]
    a1 = x1 - qa[1]
    a2 = x2 - qa[2]
    b0 = x0 - qb[0]
    b1 = x1 - qb[1]
    b2 = x2 - qb[2]
    ra = math.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
    rb = math.sqrt(b0 * b0 + b1 * b1 + b2 * b2)
    if ra < _RX_EPS or rb < _RX_EPS:
        g[0] = 0.0
        g[1] = 0.0
        g[2] = 0.0
        return ra - rb, True
    g[0] = a0 / ra - b0 / rb
    g[1] = a1 / ra - b1 / rb
    g[2] = a2 / ra - b2 / rb
    return ra - rb, False


@njit(cache=True)
def range_diff_and_grad(x, qa, qb):
    n = x.shape[0]
    h = np.empty(n)
    grad = np.empty((n, 3))
    bad = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        h[i], bad[i] = _rd_grad(x[i, 0], x[i, 1], x[i, 2], qa, qb, grad[i])
    return h, grad, bad


@njit(cache=True)
def _chol3(S, L):
    """Lower Cholesky factor of symmetrized 3x3 ``S`` into ``L``; False if not PD."""
    for i in range(3):
        for j in range(3):
            L[i, j] = 0.0
    for i in range(3):
        for j in range(i + 1):
            acc = 0.5 * (S[i, j] + S[j, i])
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            if i == j:
                if not acc > 0.0:
                    return False
                L[i, i] = math.sqrt(acc)
            else:
                L[i, j] = acc / L[j, j]
    return True


@njit(cache=True)
def _logpdf_chol(x, mu, L):
    y0 = (x[0] - mu[0]) / L[0, 0]
    y1 = (x[1] - mu[1] - L[1, 0] * y0) / L[1, 1]
    y2 = (x[2] - mu[2] - L[2, 0] * y0 - L[2, 1] * y1) / L[2, 2]
    logdet = 2.0 * (math.log(L[0, 0]) + math.log(L[1, 1]) + math.log(L[2, 2]))
    return -0.5 * (y0 * y0 + y1 * y1 + y2 * y2) - 0.5 * (3.0 * _LOG2PI + logdet)


@njit(cache=True)
def gauss_logpdf(x, mu, cov):
    K, N, _ = x.shape
    out = np.empty((K, N))
    ok = np.ones(K, dtype=np.bool_)
    L = np.empty((3, 3))
    for k in range(K):
        if not _chol3(cov[k], L):
            ok[k] = False
            L[:, :] = 0.0
            for d in range(3):
                L[d, d] = 1.0
        for n in range(N):
            out[k, n] = _logpdf_chol(x[k, n], mu[k], L)
    return out, ok


@njit(cache=True)
def mixture_logpdf(pts, mu, cov, logpi):
    K = mu.shape[0]
    P = pts.shape[0]
    comp = np.empty((K, P))
    L = np.empty((3, 3))
    for k in range(K):
        if not _chol3(cov[k], L):
            L[:, :] = 0.0
            for d in range(3):
                L[d, d] = 1.0
        for p in range(P):
            comp[k, p] = _logpdf_chol(pts[p], mu[k], L) + logpi[k]
    out = np.empty(P)
    for p in range(P):
        top = -np.inf
        for k in range(K):
            if comp[k, p] > top:
                top = comp[k, p]
        if not np.isfinite(top):
            top = 0.0
        acc = 0.0
        for k in range(K):
            acc += math.exp(comp[k, p] - top)
        out[p] = top + math.log(acc)
    return out


@njit(cache=True)
def _flow_one_kernel(k, mu, cov, x0, qa, qb, z_r, r_var, lambdas, kind, eta,
                     x, logw, m_out, S_out):
    N = x0.shape[1]
    R = r_var[k]
    P = cov[k]
    m = np.empty(3)
    for d in range(3):
        m[d] = mu[k, d]
    S = P.copy()
    F = np.empty((3, 3))
    T = np.empty((3, 3))
    H = np.empty(3)
    Hi = np.empty(3)
    u = np.empty(3)
    ui = np.empty(3)
    for n in range(N):
        for d in range(3):
            x[k, n, d] = x0[k, n, d]
    log_theta = np.zeros(N)
    status = OK
    lam_prev = 0.0
    for l in range(lambdas.shape[0]):
        lam = lambdas[l]
        dl = lam - lam_prev
        lam_prev = lam
        if kind == LEDH:
            for n in range(N):
                hv, bad = _rd_grad(x[k, n, 0], x[k, n, 1], x[k, n, 2], qa, qb, Hi)
                if bad and status == OK:
                    status = BAD_GEOMETRY
                s0 = 0.0
                Hx = 0.0
                Hmu0 = 0.0
                for i in range(3):
                    acc = 0.0
                    for j in range(3):
                        acc += P[i, j] * Hi[j]
                    ui[i] = acc
                    s0 += Hi[i] * acc
                    Hx += Hi[i] * x[k, n, i]
                    Hmu0 += Hi[i] * mu[k, i]
                s = lam * s0 + R
                zl = z_r - hv + Hx
                coef = -0.5 * Hx / s + (zl * (0.5 * lam * s0 + R) - 0.5 * R * Hmu0) / (s * s)
                for i in range(3):
                    x[k, n, i] += dl * coef * ui[i]
                fac = 1.0 - 0.5 * dl * s0 / s
                if fac <= 0.0 and status == OK:
                    status = STIFF
                log_theta[n] += math.log(abs(fac))
        hv, bad = _rd_grad(m[0], m[1], m[2], qa, qb, H)
        if bad and status == OK:
            status = BAD_GEOMETRY
        s0 = 0.0
        Hm = 0.0
        Hmu0 = 0.0
        for i in range(3):
            acc = 0.0
            for j in range(3):
                acc += P[i, j] * H[j]
            u[i] = acc
            s0 += H[i] * acc
            Hm += H[i] * m[i]
            Hmu0 += H[i] * mu[k, i]
        s = lam * s0 + R
        zl = z_r - hv + Hm
        if kind == GROMOV:
            sq = math.sqrt(dl * R)
            for n in range(N):
                Hx = 0.0
                for i in range(3):
                    Hx += H[i] * x[k, n, i]
                c = (dl * (zl - Hx) + sq * eta[l, k, n]) / s
                for i in range(3):
                    x[k, n, i] += c * u[i]
            c = dl * (zl - Hm) / s
            for i in range(3):
                m[i] += c * u[i]
            for i in range(3):
                for j in range(3):
                    F[i, j] = (1.0 if i == j else 0.0) - dl * u[i] * H[j] / s
        else:
            c_b = (zl * (0.5 * lam * s0 + R) - 0.5 * R * Hmu0) / (s * s)
            if kind == EDH:
                for n in range(N):
                    Hx = 0.0
                    for i in range(3):
                        Hx += H[i] * x[k, n, i]
                    c = dl * (-0.5 * Hx / s + c_b)
                    for i in range(3):
                        x[k, n, i] += c * u[i]
                fac = 1.0 - 0.5 * dl * s0 / s
                if fac <= 0.0 and status == OK:
                    status = STIFF
                lf = math.log(abs(fac))
                for n in range(N):
                    log_theta[n] += lf
            c = dl * (-0.5 * Hm / s + c_b)
            for i in range(3):
                m[i] += c * u[i]
            for i in range(3):
                for j in range(3):
                    F[i, j] = (1.0 if i == j else 0.0) - 0.5 * dl * u[i] * H[j] / s
        # S <- F S F^T (+ dl Q)
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for t in range(3):
                    acc += F[i, t] * S[t, j]
                T[i, j] = acc
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for t in range(3):
                    acc += T[i, t] * F[j, t]
                S_out[k, i, j] = acc
        if kind == GROMOV:
            for i in range(3):
                for j in range(3):
                    S_out[k, i, j] += dl * u[i] * u[j] * R / (s * s)
        for i in range(3):
            for j in range(3):
                S[i, j] = 0.5 * (S_out[k, i, j] + S_out[k, j, i])

    for i in range(3):
        m_out[k, i] = m[i]
        for j in range(3):
            S_out[k, i, j] = S[i, j]
    Lp = np.empty((3, 3))
    if not _chol3(P, Lp):
        return NON_PD if status == OK else status
    if kind == GROMOV:
        Lq = np.empty((3, 3))
        if not _chol3(S, Lq):
            if status == OK:
                status = NON_PD
            for d in range(3):
                for e in range(3):
                    Lq[d, e] = 1.0 if d == e else 0.0
        for n in range(N):
            logw[k, n] = _logpdf_chol(x[k, n], mu[k], Lp) - _logpdf_chol(x[k, n], m, Lq)
    else:
        for n in range(N):
            logw[k, n] = (_logpdf_chol(x[k, n], mu[k], Lp) - _logpdf_chol(x0[k, n], mu[k], Lp)
                          + log_theta[n])
    if status == OK:
        for n in range(N):
            if not np.isfinite(logw[k, n]):
                return NON_FINITE
            for d in range(3):
                if not np.isfinite(x[k, n, d]):
                    return NON_FINITE
    return status


@njit(cache=True)
def flow_tdoa(mu, cov, x0, qa, qb, z_r, r_var, lambdas, kind, eta):
    K, N, _ = x0.shape
    x = np.empty_like(x0)
    logw = np.empty((K, N))
    m_out = np.empty((K, 3))
    S_out = np.empty((K, 3, 3))
    status = np.zeros(K, dtype=np.int64)
    for k in range(K):
        status[k] = _flow_one_kernel(k, mu, cov, x0, qa, qb, z_r, r_var, lambdas, kind, eta,
                                     x, logw, m_out, S_out)
    return x, logw, m_out, S_out, status
