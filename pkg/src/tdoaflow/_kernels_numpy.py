"""Pure-numpy implementations of the hot kernels.

Signatures match :mod:`tdoaflow._kernels_numba` exactly; the two are
interchangeable and are checked against each other in the test suite.
"""

import numpy as np

EDH, LEDH, GROMOV = 0, 1, 2
OK, BAD_GEOMETRY, NON_FINITE, NON_PD, STIFF = 0, 1, 2, 3, 4

_LOG2PI = np.log(2.0 * np.pi)
_RX_EPS = 1e-6


def range_diff_and_grad(x, qa, qb):
    """Range difference (meters) and its gradient for points ``x[..., 3]``."""
    da = x - qa
    db = x - qb
    ra = np.sqrt(np.sum(da * da, axis=-1))
    rb = np.sqrt(np.sum(db * db, axis=-1))
    bad = (ra < _RX_EPS) | (rb < _RX_EPS)
    ra_s = np.where(bad, 1.0, ra)
    rb_s = np.where(bad, 1.0, rb)
    grad = np.where(bad[..., None], 0.0, da / ra_s[..., None] - db / rb_s[..., None])
    return ra - rb, grad, bad


def _chol_batch(cov):
    """Cholesky factors of ``cov[k]``; non-PD entries get identity and ok=False."""
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    ok = np.ones(sym.shape[0], dtype=bool)
    try:
        return np.linalg.cholesky(sym), ok
    except np.linalg.LinAlgError:
        out = np.empty_like(sym)
        for k in range(sym.shape[0]):
            try:
                out[k] = np.linalg.cholesky(sym[k])
            except np.linalg.LinAlgError:
                out[k] = np.eye(sym.shape[-1])
                ok[k] = False
        return out, ok


def gauss_logpdf(x, mu, cov):
    """log N(x[k, n]; mu[k], cov[k]) with shape (K, N); also returns per-kernel ok."""
    L, ok = _chol_batch(cov)
    d = x.shape[-1]
    diff = x - mu[:, None, :]
    # L y = diff, per kernel
    y = np.linalg.solve(L[:, None, :, :], diff[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.abs(np.diagonal(L, axis1=-2, axis2=-1))), axis=-1)
    out = -0.5 * np.sum(y * y, axis=-1) - 0.5 * (d * _LOG2PI + logdet)[:, None]
    return out, ok


def mixture_logpdf(pts, mu, cov, logpi):
    """log sum_k exp(logpi[k]) N(pts; mu[k], cov[k]) for points of shape (P, 3)."""
    K = mu.shape[0]
    comp, _ = gauss_logpdf(np.broadcast_to(pts, (K,) + pts.shape), mu, cov)
    comp = comp + logpi[:, None]
    top = np.max(comp, axis=0)
    safe = np.where(np.isfinite(top), top, 0.0)
    return safe + np.log(np.sum(np.exp(comp - safe), axis=0))


def flow_tdoa(mu, cov, x0, qa, qb, z_r, r_var, lambdas, kind, eta):
    """Migrate per-kernel particle clouds toward one range-difference measurement.

    All lengths in meters; ``z_r`` is the measured range difference and
    ``r_var`` its variance (scalar or one value per kernel). Returns ``(x1, logw, mu1, cov1, status)`` where
    ``logw = log prior(x1) - log q(x1)`` and ``(mu1, cov1)`` are the flowed
    tracked moments.
    """
    K, N, _ = x0.shape
    R = np.broadcast_to(np.asarray(r_var, dtype=float), (K,))
    P = cov
    x = x0.copy()
    m = mu.copy()
    S = cov.copy()
    status = np.zeros(K, dtype=np.int64)
    eye = np.eye(3)
    log_theta = np.zeros((K, N)) if kind == LEDH else np.zeros(K)
    lam_prev = 0.0
    for l in range(lambdas.shape[0]):
        lam = lambdas[l]
        dl = lam - lam_prev
        lam_prev = lam
        if kind == LEDH:
            hv, H, bad = range_diff_and_grad(x, qa, qb)
            status[np.any(bad, axis=1) & (status == 0)] = BAD_GEOMETRY
            u = np.einsum("kij,knj->kni", P, H)
            s0 = np.sum(H * u, axis=-1)
            Rk = R[:, None]
            s = lam * s0 + Rk
            Hx = np.sum(H * x, axis=-1)
            zl = z_r - hv + Hx
            Hmu0 = np.einsum("knj,kj->kn", H, mu)
            coef = -0.5 * Hx / s + (zl * (0.5 * lam * s0 + Rk) - 0.5 * Rk * Hmu0) / (s * s)
            x = x + dl * coef[..., None] * u
            fac = 1.0 - 0.5 * dl * s0 / s
            stiff = np.any(fac <= 0.0, axis=1)
            status[stiff & (status == 0)] = STIFF
            log_theta = log_theta + np.log(np.abs(fac))
        hv, H, bad = range_diff_and_grad(m, qa, qb)
        status[bad & (status == 0)] = BAD_GEOMETRY
        u = np.einsum("kij,kj->ki", P, H)
        s0 = np.sum(H * u, axis=-1)
        s = lam * s0 + R
        Hm = np.sum(H * m, axis=-1)
        zl = z_r - hv + Hm
        if kind == GROMOV:
            gr = u / s[:, None]
            Hx = np.einsum("knj,kj->kn", x, H)
            x = (x + dl * (zl[:, None] - Hx)[..., None] * gr[:, None, :]
                 + (np.sqrt(dl * R)[:, None] * eta[l])[..., None] * gr[:, None, :])
            m = m + dl * (zl - Hm)[:, None] * gr
            F = eye - dl * gr[:, :, None] * H[:, None, :]
            S = F @ S @ np.swapaxes(F, -1, -2) + dl * R[:, None, None] * gr[:, :, None] * gr[:, None, :]
        else:
            Hmu0 = np.sum(H * mu, axis=-1)
            c_b = (zl * (0.5 * lam * s0 + R) - 0.5 * R * Hmu0) / (s * s)
            if kind == EDH:
                Hx = np.einsum("knj,kj->kn", x, H)
                coef = -0.5 * Hx / s[:, None] + c_b[:, None]
                x = x + dl * coef[..., None] * u[:, None, :]
                fac = 1.0 - 0.5 * dl * s0 / s
                status[(fac <= 0.0) & (status == 0)] = STIFF
                log_theta = log_theta + np.log(np.abs(fac))
            m = m + dl * (-0.5 * Hm / s + c_b)[:, None] * u
            F = eye - 0.5 * dl * (u / s[:, None])[:, :, None] * H[:, None, :]
            S = F @ S @ np.swapaxes(F, -1, -2)
        S = 0.5 * (S + np.swapaxes(S, -1, -2))

    prior_x1, ok_p = gauss_logpdf(x, mu, cov)
    status[~ok_p & (status == 0)] = NON_PD
    if kind == GROMOV:
        q_x1, ok_q = gauss_logpdf(x, m, S)
        status[~ok_q & (status == 0)] = NON_PD
        logw = prior_x1 - q_x1
    else:
        prior_x0, _ = gauss_logpdf(x0, mu, cov)
        lt = log_theta if kind == LEDH else log_theta[:, None]
        logw = prior_x1 - prior_x0 + lt
    finite = np.all(np.isfinite(x), axis=(1, 2)) & np.all(np.isfinite(logw), axis=1)
    status[~finite & (status == 0)] = NON_FINITE
    return x, logw, m, S, status
