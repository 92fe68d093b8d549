"""Homotopy particle flows: EDH, LEDH and Gromov.

Two layers live here. The generic layer (``edh_params``, ``gromov_params``,
``migrate``, ``mapping_factor``) works for any linearized model with an
m-dimensional measurement and is used for verification. The batched layer
(``flow_tdoa_batch``) is the production path for scalar TDOA measurements;
it dispatches to the numba or numpy kernels.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import _backend
from .errors import (
    FlowStiffness,
    InvalidFlowKind,
    InvalidParam,
    NonFiniteState,
    SingularMatrix,
)


class FlowKind(enum.IntEnum):
    EDH = 0
    LEDH = 1
    GROMOV = 2

    @classmethod
    def parse(cls, value) -> "FlowKind":
        if isinstance(value, FlowKind):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise InvalidFlowKind(f"unknown flow kind {value!r}") from None

    @property
    def stochastic(self) -> bool:
        return self is FlowKind.GROMOV


def lambda_schedule(n_steps: int, kind: str = "uniform", ratio: float = 1.0) -> np.ndarray:
    """Pseudo-time grid λ_1 < ... < λ_N = 1 (λ_0 = 0 implied)."""
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidParam(f"n_steps must be a positive integer, got {n_steps}")
    n_steps = int(n_steps)
    if kind == "uniform":
        lam = np.arange(1, n_steps + 1, dtype=float) / n_steps
    elif kind == "geometric":
        if not ratio > 0:
            raise InvalidParam(f"geometric ratio must be positive, got {ratio}")
        steps = ratio ** np.arange(n_steps, dtype=float)
        lam = np.cumsum(steps) / steps.sum()
    else:
        raise InvalidParam(f"unknown schedule kind {kind!r}")
    lam[-1] = 1.0
    return lam


def step_sizes(schedule) -> np.ndarray:
    lam = np.asarray(schedule, dtype=float)
    return np.diff(np.concatenate(([0.0], lam)))


@dataclass
class LinearizedModel:
    H: np.ndarray
    R: np.ndarray
    z: np.ndarray
    mu0: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        d = self.P.shape[0]
        self.H = np.asarray(self.H, dtype=float).reshape(-1, d)
        m = self.H.shape[0]
        self.R = np.asarray(self.R, dtype=float).reshape(m, m)
        self.z = np.asarray(self.z, dtype=float).reshape(m)
        self.mu0 = np.asarray(self.mu0, dtype=float).reshape(d)


@dataclass
class FlowParams:
    A: np.ndarray
    b: np.ndarray
    Q: np.ndarray


def _solve_or_raise(M, B, what):
    try:
        return np.linalg.solve(M, B)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(f"{what} is singular") from exc


def edh_params(model: LinearizedModel, lam: float) -> FlowParams:
    P, H, R, z, mu0 = model.P, model.H, model.R, model.z, model.mu0
    d = P.shape[0]
    eye = np.eye(d)
    S = lam * H @ P @ H.T + R
    A = -0.5 * P @ H.T @ _solve_or_raise(S, H, "lambda*H P H^T + R")
    Rinv_z = _solve_or_raise(R, z, "R")
    b = (eye + 2 * lam * A) @ ((eye + lam * A) @ P @ H.T @ Rinv_z + A @ mu0)
    return FlowParams(A, b, np.zeros((d, d)))


def gromov_params(model: LinearizedModel, lam: float) -> FlowParams:
    P, H, R, z = model.P, model.H, model.R, model.z
    try:
        Pinv = np.linalg.inv(P)
        Rinv = np.linalg.inv(R)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("prior or noise covariance is singular") from exc
    info = H.T @ Rinv @ H
    M = _solve_or_raise(Pinv + lam * info, np.eye(P.shape[0]), "P^-1 + lambda H^T R^-1 H")
    A = -M @ info
    b = M @ H.T @ Rinv @ z
    Q = M @ info @ M
    return FlowParams(A, b, 0.5 * (Q + Q.T))


def psd_sqrt(Q, clamp=1e-12):
    """Symmetric square root of a PSD matrix; tiny negative eigenvalues clamp to 0."""
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    if np.any(w < -clamp * scale):
        raise SingularMatrix("diffusion matrix is not positive semidefinite")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


@dataclass
class ParticleSet:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(self.points.shape[0])


@dataclass
class FlowResult:
    particles: ParticleSet
    log: List[FlowParams]
    schedule: np.ndarray
    kind: FlowKind
    # per-particle log mapping factor (LEDH) or scalar (EDH); None for GROMOV
    log_theta: Optional[np.ndarray] = None
    mean_track: List[np.ndarray] = field(default_factory=list)


ModelProvider = Callable[[np.ndarray], LinearizedModel]


def migrate(particles: ParticleSet, provider: ModelProvider, schedule, kind,
            rng: Optional[np.random.Generator] = None, mean0=None) -> FlowResult:
    """Euler (or Euler-Maruyama) migration of a particle set along λ.

    ``provider(x)`` returns the linearized model at point ``x``. EDH and
    GROMOV linearize at a tracked mean that moves with the drift only;
    LEDH linearizes at every particle.
    """
    kind = FlowKind.parse(kind)
    if kind.stochastic and rng is None:
        raise InvalidParam("GROMOV flow requires a seeded RNG")
    x = particles.points.copy()
    if x.shape[0] == 0:
        raise InvalidParam("cannot migrate an empty particle set")
    lam = np.asarray(schedule, dtype=float)
    dls = step_sizes(lam)
    mean = np.average(x, axis=0, weights=None) if mean0 is None else np.asarray(mean0, float)
    param_fn = gromov_params if kind.stochastic else edh_params
    log: List[FlowParams] = []
    track = [mean.copy()]
    log_theta = np.zeros(x.shape[0]) if kind is FlowKind.LEDH else None
    eye = np.eye(x.shape[1])
    for l, (lam_l, dl) in enumerate(zip(lam, dls)):
        if kind is FlowKind.LEDH:
            new = np.empty_like(x)
            for i in range(x.shape[0]):
                fp = edh_params(provider(x[i]), lam_l)
                new[i] = x[i] + dl * (fp.A @ x[i] + fp.b)
                log_theta[i] += np.log(abs(np.linalg.det(eye + dl * fp.A)))
            fp_mean = edh_params(provider(mean), lam_l)
            mean = mean + dl * (fp_mean.A @ mean + fp_mean.b)
            log.append(fp_mean)
            x = new
        else:
            fp = param_fn(provider(mean), lam_l)
            x = x + dl * (x @ fp.A.T + fp.b)
            if kind.stochastic:
                L = psd_sqrt(fp.Q)
                x = x + np.sqrt(dl) * rng.standard_normal(x.shape) @ L.T
            mean = mean + dl * (fp.A @ mean + fp.b)
            log.append(fp)
        track.append(mean.copy())
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(f"non-finite particle at flow step {l + 1}")
    if kind is FlowKind.EDH:
        log_theta = np.full(x.shape[0], np.log(mapping_factor(log, lam)))
    return FlowResult(ParticleSet(x, particles.weights.copy()), log, lam, kind, log_theta, track)


def mapping_factor(flow_log: List[FlowParams], schedule) -> float:
    """θ̃ = Π |det(I + Δλ A(λ_l))| for a deterministic flow log."""
    dls = step_sizes(schedule)
    if len(flow_log) != len(dls):
        raise InvalidParam("flow log and schedule lengths differ")
    theta = 1.0
    for fp, dl in zip(flow_log, dls):
        if np.any(fp.Q != 0):
            raise InvalidFlowKind("mapping factor is undefined for a stochastic flow")
        A = np.atleast_2d(fp.A)
        det = np.linalg.det(np.eye(A.shape[0]) + dl * A)
        if det <= 0:
            raise FlowStiffness(f"det(I + dλ A) = {det:.3g} <= 0")
        theta *= abs(det)
    return float(theta)


# ---------------------------------------------------------------------------
# Batched scalar-TDOA path

STATUS_OK = 0
STATUS_NAMES = {0: "ok", 1: "degenerate-geometry", 2: "non-finite", 3: "non-pd", 4: "stiffness"}


@dataclass
class BatchFlow:
    """Output of one flow per kernel toward a single measurement."""

    points: np.ndarray  # (K, N, 3) migrated particles
    logw: np.ndarray  # (K, N) log prior(x1) - log q(x1)
    mean: np.ndarray  # (K, 3) flowed kernel means
    cov: np.ndarray  # (K, 3, 3) flowed kernel covariances
    status: np.ndarray  # (K,) kernel status codes

    @property
    def ok(self) -> np.ndarray:
        return self.status == STATUS_OK


def flow_tdoa_batch(means, covs, points, pair, z_range, r_var, schedule, kind,
                    rng: Optional[np.random.Generator] = None, backend=None) -> BatchFlow:
    """Flow ``points[k]`` (drawn from kernel k) toward range difference ``z_range``.

    Lengths are meters; ``r_var`` is the range-difference noise variance,
    either one value or one per kernel.
    Kernels whose flow fails are flagged in ``status`` rather than raising.
    """
    kind = FlowKind.parse(kind)
    lam = np.ascontiguousarray(schedule, dtype=float)
    points = np.ascontiguousarray(points, dtype=float)
    K, N, _ = points.shape
    if kind.stochastic:
        if rng is None:
            raise InvalidParam("GROMOV flow requires a seeded RNG")
        eta = rng.standard_normal((lam.size, K, N))
    else:
        eta = np.zeros((1, 1, 1))
    kern = _backend.get(backend)
    x, logw, m, S, status = kern.flow_tdoa(
        np.ascontiguousarray(means, dtype=float), np.ascontiguousarray(covs, dtype=float),
        points, pair.rx_a, pair.rx_b, float(z_range),
        np.ascontiguousarray(np.broadcast_to(np.asarray(r_var, dtype=float), (K,))),
        lam, int(kind), eta)
    return BatchFlow(x, logw, m, S, status)
