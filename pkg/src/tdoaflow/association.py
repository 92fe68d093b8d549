"""Potential sources and belief-propagation data association.

Internally every TDOA is handled as a range difference in meters
(``z_r = z * c``); likelihood ratios and association marginals are
unchanged by that scaling.

Message conventions for one sensor with ``J`` legacy PSs and ``M``
measurements:

* ``beta[j, a]``, ``a = 0..M``: legacy-PS messages, column 0 is the
  missed-detection/nonexistence mass.
* ``xi0[m]``: new-PS message entry for "measurement m is not from a legacy
  PS". Entries for ``b >= 1`` are identically 1 and not stored.
* Each measurement's messages carry a common factor ``1 / c_m`` with
  ``c_m = mu_c f_c(z_m)`` (or 1 when that is zero).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import _backend
from .errors import EmptyIntersection, InvalidParam, ZeroMass
from .flow import FlowKind, flow_tdoa_batch
from .geometry import Box, Medium, SensorPair
from .gmm import GmmBelief, init_birth_gmm, refit_kernels, sample_belief

log = logging.getLogger(__name__)

_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


@dataclass
class DaConfig:
    p_d: float = 0.95
    mu_c: float = 1.0
    mu_b: float = 0.1
    medium: Medium = field(default_factory=lambda: Medium(1500.0, 0.001 / 1500.0))
    bp_max_iters: int = 200
    bp_tol: float = 1e-6
    n_xi_samples: int = 1000

    def __post_init__(self):
        if not 0 < self.p_d <= 1:
            raise InvalidParam(f"p_d must lie in (0, 1], got {self.p_d}")
        if self.mu_c < 0:
            raise InvalidParam(f"mu_c must be nonnegative, got {self.mu_c}")
        if self.mu_b < 0:
            raise InvalidParam(f"mu_b must be nonnegative, got {self.mu_b}")
        if self.bp_max_iters < 1 or not self.bp_tol > 0:
            raise InvalidParam("bp_max_iters must be >= 1 and bp_tol > 0")

    @property
    def r_var(self) -> float:
        """Range-difference noise variance, m^2."""
        return self.medium.sigma_range ** 2


@dataclass
class FlowSettings:
    """Method budget: flow kind, pseudo-time grid and particle counts."""

    kind: FlowKind
    schedule: np.ndarray
    n_kernels: int = 100
    n_particles_legacy: int = 500
    n_particles_new: int = 30
    kappa_spread: float = 1.0
    birth_cov_scale: float = 4.0
    gate_sigmas: float = 5.0
    # add second-order linearization error of h to R, per kernel
    curvature_inflation: bool = True
    backend: Optional[str] = None


@dataclass
class SensorScan:
    pair: SensorPair
    z: np.ndarray  # seconds

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float).reshape(-1)

    @property
    def n(self) -> int:
        return self.z.size


@dataclass
class PotentialSource:
    id: int
    belief: GmmBelief
    existence: float
    origin: Tuple[int, int] = (-1, -1)

    def __post_init__(self):
        if not (0.0 <= self.existence <= 1.0):
            raise InvalidParam(f"existence must lie in [0, 1], got {self.existence}")


@dataclass
class AssociationTables:
    beta: np.ndarray  # (J, M+1)
    xi0: np.ndarray  # (M,)
    kappa: Optional[np.ndarray] = None  # (J, M+1)
    iota: Optional[np.ndarray] = None  # (M, J+1)


class DaResult(NamedTuple):
    kappa: np.ndarray
    iota: np.ndarray
    converged: bool
    iterations: int


def _range_loglik(z_r, h, r_var):
    return -0.5 * (z_r - h) ** 2 / r_var - 0.5 * np.log(r_var) - _LOG_SQRT_2PI


def _range_diff(x, pair: SensorPair):
    return np.linalg.norm(x - pair.rx_a, axis=-1) - np.linalg.norm(x - pair.rx_b, axis=-1)


def clutter_intensity(scan: SensorScan, cfg: DaConfig) -> np.ndarray:
    """mu_c * f_c(z_m) in range-difference units (1/m)."""
    z_r = scan.z * cfg.medium.c
    d = scan.pair.baseline
    return np.where(np.abs(z_r) <= d, cfg.mu_c / (2.0 * d), 0.0)


def normalizers(scan: SensorScan, cfg: DaConfig) -> np.ndarray:
    lam_c = clutter_intensity(scan, cfg)
    return np.where(lam_c > 0, lam_c, 1.0)


# ---------------------------------------------------------------------------
# Legacy PS messages


@dataclass
class BetaResult:
    """Messages plus the particle sets they were computed from."""

    beta: np.ndarray  # (M+1,)
    x0: np.ndarray  # (K, N, 3) prior particles
    w0: np.ndarray  # (K, N) prior weights, sum = existence
    flowed: List[Optional[np.ndarray]]  # per a>=1: (K, N, 3) or None if fully gated
    contrib: List[Optional[np.ndarray]]  # per a>=1: IS weight * q-factor, (K, N)
    failures: int = 0


def curvature_variance(means, covs, pair: SensorPair) -> np.ndarray:
    """Variance of the quadratic term of h under each kernel, ½ tr((∇²h P)²).

    ∇²|x - q| = (I - u uᵀ) / |x - q| with u the unit vector from q.
    """
    eye = np.eye(3)
    hess = np.zeros((means.shape[0], 3, 3))
    for q, sign in ((pair.rx_a, 1.0), (pair.rx_b, -1.0)):
        d = means - q
        r = np.maximum(np.linalg.norm(d, axis=1), 1e-9)
        u = d / r[:, None]
        hess += sign * (eye - u[:, :, None] * u[:, None, :]) / r[:, None, None]
    HP = hess @ covs
    return 0.5 * np.einsum("kij,kji->k", HP, HP)


def kernel_noise(means, covs, pair: SensorPair, cfg: DaConfig, settings: FlowSettings) -> np.ndarray:
    R = np.full(means.shape[0], cfg.r_var)
    if settings.curvature_inflation:
        R = R + curvature_variance(means, covs, pair)
    return R


def gate_kernels(means, covs, pair: SensorPair, z_r: float, r_var: float, n_sigma: float = 5.0):
    """Boolean mask of kernels whose n-sigma ellipsoid may reach the measured shell."""
    w, V = np.linalg.eigh(covs)
    axes = V * np.sqrt(np.maximum(w, 0.0))[:, None, :]  # columns are sigma axes
    da = means - pair.rx_a
    db = means - pair.rx_b
    g = (da / np.linalg.norm(da, axis=1, keepdims=True)
         - db / np.linalg.norm(db, axis=1, keepdims=True))
    pg = np.einsum("kij,kj->ki", covs, g)
    sg = np.sqrt(np.maximum(np.sum(g * pg, axis=1), 1e-300))
    dirs = np.concatenate([np.swapaxes(axes, 1, 2), (pg / sg[:, None])[:, None, :]], axis=1)
    probe = means[:, None, :] + n_sigma * np.concatenate([dirs, -dirs], axis=1)
    h = _range_diff(np.concatenate([means[:, None, :], probe], axis=1), pair)
    margin = 4.0 * np.sqrt(r_var)  # scalar or per kernel
    return (z_r >= h.min(axis=1) - margin) & (z_r <= h.max(axis=1) + margin)


def flow_embedded_beta(ps: PotentialSource, scan: SensorScan, cfg: DaConfig,
                       settings: FlowSettings, rng: np.random.Generator,
                       x0: Optional[np.ndarray] = None) -> BetaResult:
    """β message of one legacy PS, with one flow per (kernel, measurement).

    Prior particles are drawn once per kernel and shared by all measurement
    flows. The a-th entry sums q-factor times flow-corrected weight over
    all flowed particles; entry 0 collects the missed-detection and
    nonexistence mass.
    """
    bel = ps.belief
    r = float(ps.existence)
    N = settings.n_particles_legacy
    if x0 is None:
        x0 = sample_belief(bel, N, rng)
    K, N = x0.shape[:2]
    w0 = np.repeat((r * bel.weights / N)[:, None], N, axis=1)
    M = scan.n
    beta = np.zeros(M + 1)
    beta[0] = (1.0 - cfg.p_d) * w0.sum() + (1.0 - r)
    flowed: List[Optional[np.ndarray]] = []
    contrib: List[Optional[np.ndarray]] = []
    if M == 0 or r == 0.0:
        return BetaResult(beta, x0, w0, [None] * M, [None] * M)
    R = kernel_noise(bel.means, bel.covs, scan.pair, cfg, settings)
    c_m = normalizers(scan, cfg)
    z_r = scan.z * cfg.medium.c
    failures = 0
    for m in range(M):
        gate = gate_kernels(bel.means, bel.covs, scan.pair, z_r[m], R, settings.gate_sigmas)
        if not np.any(gate):
            flowed.append(None)
            contrib.append(None)
            continue
        idx = np.flatnonzero(gate)
        out = flow_tdoa_batch(bel.means[idx], bel.covs[idx], x0[idx], scan.pair, z_r[m], R[idx],
                              settings.schedule, settings.kind, rng=rng,
                              backend=settings.backend)
        pts = np.array(x0)
        wts = np.zeros((K, N))
        pts[idx] = out.points
        h = _range_diff(out.points, scan.pair)
        loglr = np.log(cfg.p_d) + _range_loglik(z_r[m], h, R[idx, None]) - np.log(c_m[m])
        with np.errstate(over="ignore", invalid="ignore"):
            c = w0[idx] * np.exp(out.logw + loglr)
        bad = ~out.ok | ~np.all(np.isfinite(c), axis=1)
        if np.any(bad):
            failures += int(bad.sum())
            c[bad] = 0.0
        wts[idx] = c
        flowed.append(pts)
        contrib.append(wts)
        beta[m + 1] = wts.sum()
    if failures:
        log.debug("PS %d: %d kernel flows failed and were zeroed", ps.id, failures)
    return BetaResult(beta, x0, w0, flowed, contrib, failures)


# ---------------------------------------------------------------------------
# New PS messages


@dataclass
class BirthResult:
    belief: Optional[GmmBelief]
    evidence: float  # E_{f_b}[f(z|x)] in 1/m
    failures: int = 0


def birth_flow(z: float, scan: SensorScan, cfg: DaConfig, roi: Box, settings: FlowSettings,
               rng: np.random.Generator) -> BirthResult:
    """Flow birth-mixture particles toward one measurement.

    The birth mixture g is only a proposal; weights divide it out so the
    weighted cloud represents f_b(x) f(z|x), and its total weight is the
    birth evidence E_{f_b}[f(z|x)].
    """
    med = cfg.medium
    try:
        g = init_birth_gmm(z, scan.pair, med, roi, settings.n_kernels, rng,
                           kappa_spread=settings.kappa_spread, cov_scale=settings.birth_cov_scale)
    except EmptyIntersection:
        return BirthResult(None, 0.0)
    K = g.n_kernels
    N = settings.n_particles_new
    x0 = sample_belief(g, N, rng)
    z_r = z * med.c
    R = kernel_noise(g.means, g.covs, scan.pair, cfg, settings)
    out = flow_tdoa_batch(g.means, g.covs, x0, scan.pair, z_r, R, settings.schedule,
                          settings.kind, rng=rng, backend=settings.backend)
    pts = out.points.reshape(-1, 3)
    log_g = _backend.get(settings.backend).mixture_logpdf(
        np.ascontiguousarray(pts), g.means, g.covs, np.log(g.weights))
    inside = roi.contains(pts)
    log_fb = np.where(inside, -np.log(roi.volume), -np.inf)
    loglik = _range_loglik(z_r, _range_diff(pts, scan.pair), np.repeat(R, N))
    logw = (np.log(g.weights)[:, None] + out.logw - np.log(N)).reshape(-1)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        w = np.exp(logw + log_fb - log_g + loglik)
    labels = np.repeat(np.arange(K), N)
    okp = np.repeat(out.ok, N) & np.isfinite(w)
    w = np.where(okp, w, 0.0)
    failures = int((~out.ok).sum())
    E = float(w.sum())
    if not E > 0:
        return BirthResult(None, 0.0, failures)
    bel = GmmBelief(g.means, g.covs, g.weights, pts, w / E, labels)
    return BirthResult(refit_kernels(bel), E, failures)


def new_ps_xi(scan: SensorScan, cfg: DaConfig, roi: Box, evidence: Optional[Sequence] = None,
              rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """ξ_m(0) for every measurement, normalized by ``c_m``.

    Without supplied ``evidence`` the birth expectation is a plain Monte-Carlo
    average over ``cfg.n_xi_samples`` uniform ROI points.
    """
    M = scan.n
    if M == 0:
        return np.zeros(0)
    z_r = scan.z * cfg.medium.c
    if evidence is None:
        if rng is None:
            rng = np.random.default_rng(0)
        pts = roi.sample(cfg.n_xi_samples, rng)
        h = _range_diff(pts, scan.pair)
        evidence = np.exp(_range_loglik(z_r[:, None], h[None, :], cfg.r_var)).mean(axis=1)
    E = np.asarray(evidence, dtype=float).reshape(M)
    return (clutter_intensity(scan, cfg) + cfg.mu_b * E) / normalizers(scan, cfg)


# ---------------------------------------------------------------------------
# Iterative data association


def da_fixed_point(beta, xi0, cfg: Optional[DaConfig] = None, max_iters: Optional[int] = None,
                   tol: Optional[float] = None) -> DaResult:
    """Sum-product association loop on the bipartite PS/measurement graph.

    Returns ``kappa[j] = [1, ν_{1->j}, ..., ν_{M->j}]`` and
    ``iota[m] = [1, φ_{1->m}, ..., φ_{J->m}]``.
    """
    beta = np.asarray(beta, dtype=float)
    xi0 = np.asarray(xi0, dtype=float).reshape(-1)
    J = beta.shape[0]
    M = xi0.size
    if beta.ndim != 2 or beta.shape[1] != M + 1:
        beta = beta.reshape(J, M + 1)
    max_iters = max_iters or (cfg.bp_max_iters if cfg else 200)
    tol = tol or (cfg.bp_tol if cfg else 1e-6)
    if J == 0 or M == 0:
        return DaResult(np.ones((J, M + 1)), np.ones((M, J + 1)), True, 0)
    b0 = beta[:, 0]
    bm = beta[:, 1:]
    scale = np.maximum(beta.max(axis=1), 1e-300)
    nu = np.ones((M, J))
    phi = np.zeros((J, M))
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        bn = bm * nu.T
        den = b0[:, None] + bn.sum(axis=1, keepdims=True) - bn
        phi = bm / np.maximum(den, 1e-15 * scale[:, None])
        s = phi.sum(axis=0)
        den2 = xi0[:, None] + s[:, None] - phi.T
        nu_new = 1.0 / np.maximum(den2, 1e-12)
        delta = np.max(np.abs(nu_new - nu) / np.maximum(np.abs(nu), 1e-300))
        nu = nu_new
        if delta < tol:
            converged = True
            break
    # final φ consistent with the returned ν
    bn = bm * nu.T
    den = b0[:, None] + bn.sum(axis=1, keepdims=True) - bn
    phi = bm / np.maximum(den, 1e-15 * scale[:, None])
    kappa = np.concatenate([np.ones((J, 1)), nu.T], axis=1)
    iota = np.concatenate([np.ones((M, 1)), phi.T], axis=1)
    return DaResult(kappa, iota, converged, it)


def association_marginals(beta, kappa):
    """p(a_j = a) ∝ β_j(a) κ_j(a)."""
    p = np.asarray(beta) * np.asarray(kappa)
    return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Belief updates


def measurement_update_gamma(ps: PotentialSource, kappa, br: BetaResult, scan: SensorScan,
                             cfg: DaConfig) -> PotentialSource:
    """Posterior belief and existence of a legacy PS given its κ message."""
    kappa = np.asarray(kappa, dtype=float).reshape(-1)
    r = float(ps.existence)
    alpha_n = 1.0 - r
    C = float(kappa @ br.beta)
    if not (np.isfinite(C) and C > 0):
        raise ZeroMass(f"PS {ps.id}: total belief mass {C!r}")
    existence = float(np.clip((C - kappa[0] * alpha_n) / C, 0.0, 1.0))
    K, N = br.w0.shape
    pts = [br.x0.reshape(-1, 3)]
    wts = [(kappa[0] * (1.0 - cfg.p_d) * br.w0).reshape(-1)]
    for a, (x, c) in enumerate(zip(br.flowed, br.contrib), start=1):
        if x is None:
            continue
        pts.append(x.reshape(-1, 3))
        wts.append((kappa[a] * c).reshape(-1))
    labels = np.tile(np.repeat(np.arange(K), N), len(pts))
    pts = np.concatenate(pts)
    wts = np.concatenate(wts)
    total = wts.sum()
    if not total > 0:
        return PotentialSource(ps.id, ps.belief, existence, ps.origin)
    keep = wts > 0
    bel = GmmBelief(ps.belief.means, ps.belief.covs, ps.belief.weights,
                    pts[keep], wts[keep] / total, labels[keep])
    return PotentialSource(ps.id, refit_kernels(bel), existence, ps.origin)


def new_ps_existence(iota_m, xi0_m: float, clutter_m: float) -> float:
    """ι(0)(ξ(0) − clutter) / (ι(0) ξ(0) + Σ_j ι(j)), all in c_m-normalized units."""
    iota_m = np.asarray(iota_m, dtype=float)
    num = iota_m[0] * max(xi0_m - clutter_m, 0.0)
    den = iota_m[0] * xi0_m + iota_m[1:].sum()
    if not den > 0:
        return 0.0
    return float(np.clip(num / den, 0.0, 1.0))


def new_ps_belief(scan: SensorScan, iota, cfg: DaConfig, roi: Box, settings: FlowSettings,
                  rng: Optional[np.random.Generator] = None, births=None, xi0=None,
                  first_id: int = 0, sensor: int = -1) -> List[PotentialSource]:
    """One new PS per measurement, with existence from the DA output ι."""
    M = scan.n
    if M == 0:
        return []
    if births is None:
        if rng is None:
            raise InvalidParam("rng required to build birth beliefs")
        births = [birth_flow(float(z), scan, cfg, roi, settings, rng) for z in scan.z]
    if xi0 is None:
        xi0 = new_ps_xi(scan, cfg, roi, evidence=[b.evidence for b in births])
    clutter = clutter_intensity(scan, cfg) / normalizers(scan, cfg)
    iota = np.asarray(iota, dtype=float).reshape(M, -1)
    out = []
    for m in range(M):
        b = births[m]
        if b.belief is None:
            bel = GmmBelief(np.zeros((1, 3)), np.eye(3)[None], np.ones(1))
            r = 0.0
        else:
            bel = b.belief
            r = new_ps_existence(iota[m], xi0[m], clutter[m])
        out.append(PotentialSource(first_id + m, bel, r, (sensor, m)))
    return out


def prune(sources: Sequence[PotentialSource], threshold: float) -> List[PotentialSource]:
    return [ps for ps in sources if ps.existence >= threshold]
