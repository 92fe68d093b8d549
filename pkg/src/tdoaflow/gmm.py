"""Gaussian-mixture beliefs with attached particle clouds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptyIntersection, EmptyKernel, InvalidParam, NonPositiveDefinite
from .flow import FlowKind, ParticleSet, edh_params, gromov_params, step_sizes
from .geometry import Box, Medium, SensorPair

COV_FLOOR = 1e-6  # m^2, eigenvalue floor applied on refit


@dataclass
class GaussianKernel:
    mean: np.ndarray
    cov: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if self.weight < 0:
            raise InvalidParam("kernel weight must be nonnegative")


@dataclass
class GmmBelief:
    """Mixture of K Gaussian kernels in 3-D, optionally carrying labelled particles.

    ``points``/``point_weights``/``labels`` hold a weighted particle cloud in
    which ``labels[i]`` names the kernel that particle ``i`` belongs to.
    """

    means: np.ndarray  # (K, 3)
    covs: np.ndarray  # (K, 3, 3)
    weights: np.ndarray  # (K,)
    points: Optional[np.ndarray] = None
    point_weights: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 3)
        self.covs = np.asarray(self.covs, dtype=float).reshape(-1, 3, 3)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)

    @property
    def n_kernels(self) -> int:
        return self.means.shape[0]

    def kernel(self, k: int) -> GaussianKernel:
        return GaussianKernel(self.means[k], self.covs[k], float(self.weights[k]))

    def mean(self) -> np.ndarray:
        """Mixture mean (MMSE position)."""
        return self.weights @ self.means

    def particle_mean(self) -> np.ndarray:
        return np.average(self.points, axis=0, weights=self.point_weights)


def _chol(cov):
    try:
        return np.linalg.cholesky(0.5 * (cov + np.swapaxes(cov, -1, -2)))
    except np.linalg.LinAlgError as exc:
        raise NonPositiveDefinite("covariance is not positive definite") from exc


def sample_kernel(kernel: GaussianKernel, n: int, rng: np.random.Generator) -> ParticleSet:
    L = _chol(kernel.cov)
    d = kernel.mean.size
    pts = kernel.mean + rng.standard_normal((n, d)) @ L.T
    return ParticleSet(pts, np.full(n, kernel.weight / n))


def sample_belief(belief: GmmBelief, n_per_kernel: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n_per_kernel`` points from every kernel; shape (K, n, 3)."""
    L = _chol(belief.covs)
    eps = rng.standard_normal((belief.n_kernels, n_per_kernel, 3))
    return belief.means[:, None, :] + np.einsum("kij,knj->kni", L, eps)


def propagate_moments(kernel: GaussianKernel, provider, schedule, kind) -> GaussianKernel:
    """Flow a kernel's mean and covariance along the pseudo-time grid.

    The mean follows the drift; the covariance follows
    ``S <- (I + dl A) S (I + dl A)^T + dl Q``. ``provider(m)`` gives the
    linearized model at the current mean.
    """
    kind = FlowKind.parse(kind)
    fn = gromov_params if kind.stochastic else edh_params
    m = kernel.mean.copy()
    S = kernel.cov.copy()
    eye = np.eye(m.size)
    for lam, dl in zip(np.asarray(schedule, dtype=float), step_sizes(schedule)):
        fp = fn(provider(m), lam)
        F = eye + dl * fp.A
        m = m + dl * (fp.A @ m + fp.b)
        S = F @ S @ F.T + dl * fp.Q
        S = 0.5 * (S + S.T)
    return GaussianKernel(m, S, kernel.weight)


def eval_proposal(x, kernel: GaussianKernel):
    """Density N(x; mean, cov) of the (flowed) Gaussian proposal."""
    x = np.asarray(x, dtype=float)
    mean = kernel.mean
    d = mean.size
    shape = x.shape if d == 1 else x.shape[:-1]
    L = _chol(kernel.cov)
    y = np.linalg.solve(L, (x.reshape(-1, d) - mean).T)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    out = np.exp(-0.5 * np.sum(y * y, axis=0) - 0.5 * (d * np.log(2 * np.pi) + logdet))
    return float(out[0]) if shape == () else out.reshape(shape)


def floor_cov(cov, floor=COV_FLOOR):
    w, V = np.linalg.eigh(0.5 * (cov + np.swapaxes(cov, -1, -2)))
    w = np.maximum(w, floor)
    return np.einsum("...ij,...j,...kj->...ik", V, w, V)


def refit_kernels(belief: GmmBelief, floor: float = COV_FLOOR, strict: bool = False) -> GmmBelief:
    """Replace each kernel by the weighted moments of its own particles.

    Kernels whose particles carry no weight are dropped and the remaining
    weights renormalized; with ``strict=True`` that raises EmptyKernel instead.
    """
    pts = np.asarray(belief.points, dtype=float)
    w = np.asarray(belief.point_weights, dtype=float)
    lab = np.asarray(belief.labels, dtype=np.int64)
    K = belief.n_kernels
    mass = np.bincount(lab, weights=w, minlength=K)
    alive = mass > 0
    if not np.any(alive) or (strict and not np.all(alive)):
        raise EmptyKernel("kernel with zero particle weight")
    safe = np.where(alive, mass, 1.0)
    means = np.stack([np.bincount(lab, weights=w * pts[:, d], minlength=K) for d in range(3)], 1)
    means /= safe[:, None]
    diff = pts - means[lab]
    outer = (w[:, None, None] * diff[:, :, None] * diff[:, None, :]).reshape(-1, 9)
    covs = np.stack([np.bincount(lab, weights=outer[:, j], minlength=K) for j in range(9)], 1)
    covs = covs.reshape(K, 3, 3) / safe[:, None, None]
    covs = floor_cov(covs, floor)
    remap = -np.ones(K, dtype=np.int64)
    remap[alive] = np.arange(int(alive.sum()))
    keep = alive[lab]
    return GmmBelief(
        means[alive], covs[alive], mass[alive] / mass[alive].sum(),
        pts[keep], w[keep], remap[lab[keep]],
    )


# ---------------------------------------------------------------------------
# Birth kernels along the measured hyperboloid


def project_to_hyperboloid(pts, pair: SensorPair, z_range: float, n_iter: int = 30,
                           max_step: float = 200.0):
    """Damped Newton projection of points onto {p : h(p) = z_range} (meters)."""
    p = np.array(pts, dtype=float)
    for _ in range(n_iter):
        da = p - pair.rx_a
        db = p - pair.rx_b
        ra = np.linalg.norm(da, axis=1)
        rb = np.linalg.norm(db, axis=1)
        ra = np.maximum(ra, 1e-9)
        rb = np.maximum(rb, 1e-9)
        g = da / ra[:, None] - db / rb[:, None]
        r = ra - rb - z_range
        g2 = np.maximum(np.sum(g * g, axis=1), 1e-12)
        step = -(r / g2)[:, None] * g
        norm = np.linalg.norm(step, axis=1)
        scale = np.minimum(1.0, max_step / np.maximum(norm, 1e-300))
        p += step * scale[:, None]
    return p


def _kmeans(pts, k, rng, n_iter=10):
    n = pts.shape[0]
    centers = np.empty((k, pts.shape[1]))
    centers[0] = pts[rng.integers(n)]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        centers[i] = pts[int(np.argmax(d2))]
        d2 = np.minimum(d2, np.sum((pts - centers[i]) ** 2, axis=1))
    for _ in range(n_iter):
        lab = np.argmin(((pts[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        for i in range(k):
            sel = lab == i
            if np.any(sel):
                centers[i] = pts[sel].mean(axis=0)
    lab = np.argmin(((pts[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    return lab


def init_birth_gmm(z: float, pair: SensorPair, medium: Medium, roi: Box, n_kernels: int,
                   rng: np.random.Generator, kappa_spread: float = 1.0,
                   candidates_per_kernel: int = 40, cov_scale: float = 4.0,
                   jitter: float = 0.1, max_rounds: int = 5) -> GmmBelief:
    """Mixture whose kernels tile the patch of the measured hyperboloid inside ``roi``.

    Uniform ROI candidates are Newton-projected onto the hyperboloid, kept if
    they land inside the ROI within the TDOA band, then grouped by k-means.
    Each kernel is centered at its cluster medoid (so it sits on the
    surface) with covariance ``cov_scale`` times the cluster scatter plus an
    isotropic ``jitter`` (meters, std).
    """
    if n_kernels < 1:
        raise InvalidParam("n_kernels must be at least 1")
    z_r = float(z) * medium.c
    band = 3.0 * medium.sigma_range * kappa_spread
    n_cand = max(candidates_per_kernel * n_kernels, 200)
    kept = []
    n_kept = 0
    # thin patches lose most candidates; retry a few rounds before giving up
    for _ in range(max_rounds):
        proj = project_to_hyperboloid(roi.sample(n_cand, rng), pair, z_r)
        h = np.linalg.norm(proj - pair.rx_a, axis=1) - np.linalg.norm(proj - pair.rx_b, axis=1)
        good = np.isfinite(h) & (np.abs(h - z_r) <= band) & roi.contains(proj)
        kept.append(proj[good])
        n_kept += int(good.sum())
        if n_kept >= n_cand // 4:
            break
    pts = np.concatenate(kept)
    if pts.shape[0] == 0:
        raise EmptyIntersection(f"no point of the hyperboloid z={z:.6g} s lies in the ROI")
    k = min(n_kernels, pts.shape[0])
    lab = _kmeans(pts, k, rng)
    means, covs, counts = [], [], []
    for i in range(k):
        members = pts[lab == i]
        if members.shape[0] == 0:
            continue
        c = members.mean(axis=0)
        med = members[int(np.argmin(np.sum((members - c) ** 2, axis=1)))]
        diff = members - med
        scatter = diff.T @ diff / members.shape[0]
        means.append(med)
        covs.append(cov_scale * scatter + jitter ** 2 * np.eye(3))
        counts.append(members.shape[0])
    means = np.array(means)
    covs = np.array(covs)
    counts = np.asarray(counts, dtype=float)
    small = counts < 3
    if np.any(small) and means.shape[0] > 1:
        # give near-empty clusters a footprint comparable to the kernel spacing
        d2 = np.sum((means[:, None] - means[None]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        spacing = np.sqrt(np.min(d2, axis=1))
        covs[small] += (0.5 * spacing[small] ** 2)[:, None, None] * np.eye(3)
    return GmmBelief(means, covs, counts / counts.sum())
