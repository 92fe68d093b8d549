"""TDOA forward model for a synchronized receiver pair.

Positions are in meters, times in seconds. Every function accepts a single
3-vector or a stack of them with shape ``(..., 3)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, InvalidParam

# Jacobian is undefined closer than this to a receiver.
RECEIVER_EPS = 1e-6


@dataclass(frozen=True)
class Medium:
    c: float
    sigma_v: float

    def __post_init__(self):
        if not self.c > 0:
            raise InvalidParam(f"propagation speed must be positive, got {self.c}")
        if not self.sigma_v > 0:
            raise InvalidParam(f"TDOA noise std must be positive, got {self.sigma_v}")

    @property
    def sigma_range(self) -> float:
        """Noise std expressed as a range difference in meters."""
        return self.sigma_v * self.c


@dataclass(frozen=True)
class SensorPair:
    """Two receivers whose signals are cross-correlated (a 'sensor')."""

    index: int
    rx_a: np.ndarray
    rx_b: np.ndarray
    baseline: float = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.rx_a, dtype=float).reshape(3)
        b = np.asarray(self.rx_b, dtype=float).reshape(3)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise InvalidParam("receiver coordinates must be finite")
        d = float(np.linalg.norm(a - b))
        if d <= 0:
            raise InvalidParam("receivers of a pair must be distinct")
        object.__setattr__(self, "rx_a", a)
        object.__setattr__(self, "rx_b", b)
        object.__setattr__(self, "baseline", d)

    def max_tdoa(self, medium: Medium) -> float:
        return self.baseline / medium.c


def range_difference(p, pair: SensorPair) -> np.ndarray:
    """‖p − q_a‖ − ‖p − q_b‖ in meters."""
    p = np.asarray(p, dtype=float)
    return np.linalg.norm(p - pair.rx_a, axis=-1) - np.linalg.norm(p - pair.rx_b, axis=-1)


def tdoa_predict(p, pair: SensorPair, medium: Medium):
    """Noise-free TDOA of a source at ``p``."""
    out = range_difference(p, pair) / medium.c
    return float(out) if np.ndim(out) == 0 else out


def tdoa_jacobian(p, pair: SensorPair, medium: Medium) -> np.ndarray:
    """Gradient of :func:`tdoa_predict` w.r.t. position, shape ``(..., 3)``."""
    p = np.asarray(p, dtype=float)
    da = p - pair.rx_a
    db = p - pair.rx_b
    ra = np.linalg.norm(da, axis=-1, keepdims=True)
    rb = np.linalg.norm(db, axis=-1, keepdims=True)
    if np.any(ra < RECEIVER_EPS) or np.any(rb < RECEIVER_EPS):
        raise DegenerateGeometry("position coincides with a receiver")
    return (da / ra - db / rb) / medium.c


def tdoa_likelihood(z, p, pair: SensorPair, medium: Medium):
    """Gaussian density N(z; h(p), sigma_v^2), in 1/s."""
    resid = np.asarray(z, dtype=float) - tdoa_predict(p, pair, medium)
    s = medium.sigma_v
    out = np.exp(-0.5 * (resid / s) ** 2) / (math.sqrt(2 * math.pi) * s)
    return float(out) if np.ndim(out) == 0 else out


def tdoa_log_likelihood(z, p, pair: SensorPair, medium: Medium):
    resid = np.asarray(z, dtype=float) - tdoa_predict(p, pair, medium)
    s = medium.sigma_v
    return -0.5 * (resid / s) ** 2 - math.log(math.sqrt(2 * math.pi) * s)


def clutter_density(z, pair: SensorPair, medium: Medium):
    """Uniform clutter density over the feasible interval [-d/c, d/c]."""
    zmax = pair.max_tdoa(medium)
    z = np.asarray(z, dtype=float)
    out = np.where(np.abs(z) <= zmax, 1.0 / (2.0 * zmax), 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Box:
    """Axis-aligned region of interest."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(3)
        hi = np.asarray(self.hi, dtype=float).reshape(3)
        if not np.all(hi > lo):
            raise InvalidParam("box upper corner must exceed lower corner on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, half_width: float) -> "Box":
        h = float(half_width)
        return cls(np.full(3, -h), np.full(3, h))

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def contains(self, p, tol: float = 0.0):
        p = np.asarray(p, dtype=float)
        return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random((n, 3))


def face_center_receivers(half_width: float) -> np.ndarray:
    """Receivers at the six face centers, ordered +x, -x, +y, -y, +z, -z."""
    L = float(half_width)
    return np.array([[L, 0, 0], [-L, 0, 0], [0, L, 0], [0, -L, 0], [0, 0, L], [0, 0, -L]])


# 1-based receiver indices of the default nine sensors
DEFAULT_PAIRS = ((1, 2), (3, 4), (5, 6), (1, 3), (2, 4), (3, 5), (4, 6), (1, 5), (2, 6))


def make_pairs(receivers, pairs=DEFAULT_PAIRS):
    rx = np.asarray(receivers, dtype=float)
    return [SensorPair(s, rx[a - 1], rx[b - 1]) for s, (a, b) in enumerate(pairs)]
