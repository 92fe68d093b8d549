"""Scenario generation, measurement simulation, OSPA and Monte-Carlo driver."""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .association import DaConfig, SensorScan
from .errors import InvalidParam
from .geometry import DEFAULT_PAIRS, Box, Medium, SensorPair, face_center_receivers, make_pairs

THREADS_ENV = "TDOAFLOW_THREADS"


@dataclass
class Scenario:
    roi: Box
    sources: np.ndarray  # (n_t, 3)
    receivers: np.ndarray  # (n_r, 3)
    pairs: List[SensorPair]
    medium: Medium
    seed: int = 0

    def __post_init__(self):
        self.sources = np.asarray(self.sources, dtype=float).reshape(-1, 3)
        if self.sources.size and not np.all(self.roi.contains(self.sources)):
            raise InvalidParam("all sources must lie inside the ROI")


def generate_scenario(n_sources: int, roi: Box, seed: int, medium: Optional[Medium] = None,
                      pairs=DEFAULT_PAIRS, receivers=None) -> Scenario:
    """Uniform sources in ``roi``; receivers at the face centers unless given."""
    if n_sources < 0:
        raise InvalidParam("n_sources must be nonnegative")
    medium = medium or Medium(1500.0, 0.001 / 1500.0)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0,)))
    src = roi.sample(n_sources, rng)
    if receivers is None:
        half = 0.5 * (roi.hi - roi.lo)
        if not np.allclose(half, half[0]) or not np.allclose(roi.lo + half, 0):
            raise InvalidParam("face-center receivers need a cube centered at the origin")
        receivers = face_center_receivers(half[0])
    rx = np.asarray(receivers, dtype=float)
    return Scenario(roi, src, rx, make_pairs(rx, pairs), medium, seed)


def simulate_scan(scenario: Scenario, pair: SensorPair, cfg: DaConfig,
                  rng: np.random.Generator) -> SensorScan:
    med = scenario.medium
    src = scenario.sources
    det = rng.random(src.shape[0]) < cfg.p_d
    h = (np.linalg.norm(src - pair.rx_a, axis=1) - np.linalg.norm(src - pair.rx_b, axis=1)) / med.c
    z_src = h[det] + med.sigma_v * rng.standard_normal(int(det.sum()))
    n_c = rng.poisson(cfg.mu_c)
    zmax = pair.max_tdoa(med)
    z_c = rng.uniform(-zmax, zmax, n_c)
    z = np.concatenate([z_src, z_c])
    perm = rng.permutation(z.size)
    scan = SensorScan(pair, z[perm])
    # origin of each measurement: source index or -1 for clutter
    origin = np.concatenate([np.flatnonzero(det), -np.ones(n_c, dtype=int)])[perm]
    scan.origin = origin
    return scan


def simulate_scans(scenario: Scenario, cfg: DaConfig, seed: int) -> List[SensorScan]:
    return [simulate_scan(scenario, pair, cfg,
                          np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(1, s))))
            for s, pair in enumerate(scenario.pairs)]


def ospa(estimated, truth, cutoff: float = 50.0, order: float = 1.0) -> float:
    """OSPA distance between two finite point sets."""
    if not cutoff > 0:
        raise InvalidParam("cutoff must be positive")
    if not order >= 1:
        raise InvalidParam("order must be >= 1")
    X = np.asarray(estimated, dtype=float).reshape(-1, 3) if np.size(estimated) else np.zeros((0, 3))
    Y = np.asarray(truth, dtype=float).reshape(-1, 3) if np.size(truth) else np.zeros((0, 3))
    m, n = X.shape[0], Y.shape[0]
    if m == 0 and n == 0:
        return 0.0
    if m == 0 or n == 0:
        return float(cutoff)
    D = np.minimum(np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=-1), cutoff) ** order
    rows, cols = linear_sum_assignment(D)
    total = D[rows, cols].sum() + cutoff ** order * abs(m - n)
    return float((total / max(m, n)) ** (1.0 / order))


def box_stats(values) -> dict:
    """Box-plot summary with linear-interpolated quartiles and 1.5 IQR whiskers."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"n": 0}
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {
        "n": int(v.size),
        "min": float(v.min()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(v.max()),
        "iqr": float(iqr),
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "outliers": sorted(float(x) for x in v[(v < lo_fence) | (v > hi_fence)]),
    }


@dataclass
class RunResult:
    run_id: int
    seed: int
    estimates: np.ndarray
    truth: np.ndarray
    ospa: float
    cardinality_error: int
    wall_seconds: float
    diagnostics: list = field(default_factory=list)
    error: Optional[str] = None
    snapshots: Optional[list] = None

    @property
    def cardinality_true(self) -> int:
        return int(self.truth.shape[0])

    @property
    def cardinality_est(self) -> int:
        return int(self.estimates.shape[0])


def single_run(exp, run_id: int, seed: int) -> RunResult:
    """One Monte-Carlo run of experiment ``exp`` (an ``Experiment``)."""
    from .pipeline import run_all_sensors

    t0 = time.perf_counter()
    scen = generate_scenario(exp.n_sources, exp.estimator.roi, seed, exp.estimator.da.medium,
                             pairs=exp.pairs, receivers=exp.receivers)
    scans = simulate_scans(scen, exp.estimator.da, seed)
    snaps = [] if exp.snapshots else None
    hook = None if snaps is None else (lambda s, st: snaps.append(snapshot(s, st)))
    try:
        state, est, diags = run_all_sensors(scans, exp.estimator, seed, on_sensor=hook)
        err = None
    except Exception as exc:  # recorded per run, excluded from aggregates
        est, diags, err = [], [], f"{type(exc).__name__}: {exc}"
    X = np.array([e.position for e in est]).reshape(-1, 3)
    d = ospa(X, scen.sources, exp.ospa_cutoff, exp.ospa_order)
    return RunResult(run_id, seed, X, scen.sources, d, X.shape[0] - scen.sources.shape[0],
                     time.perf_counter() - t0, diags, err, snaps)


SNAPSHOT_MAX_POINTS = 1000


def snapshot(sensor: int, state) -> dict:
    """JSON-ready view of every PS after one sensor: kernels plus a point subsample."""
    out = []
    for ps in state.sources:
        b = ps.belief
        item = {
            "id": int(ps.id),
            "existence": float(ps.existence),
            "weights": b.weights.tolist(),
            "means": b.means.tolist(),
            "covs": b.covs.tolist(),
        }
        if b.points is not None and b.points.size:
            step = max(1, -(-b.points.shape[0] // SNAPSHOT_MAX_POINTS))
            item["points"] = b.points[::step].tolist()
            item["point_weights"] = b.point_weights[::step].tolist()
        out.append(item)
    return {"sensor": int(sensor), "sources": out}


@dataclass
class Experiment:
    """A fully specified Monte-Carlo experiment."""

    estimator: "object"  # pipeline.EstimatorConfig
    n_sources: int = 5
    pairs: Sequence = DEFAULT_PAIRS
    receivers: Optional[np.ndarray] = None
    ospa_cutoff: float = 50.0
    ospa_order: float = 1.0
    snapshots: bool = False


def _worker(args):
    exp, i, seed = args
    return single_run(exp, i, seed)


def thread_count(n_threads=None) -> int:
    if n_threads is None:
        n_threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, int(n_threads))


def monte_carlo(exp: Experiment, n_runs: int, base_seed: int, n_threads=None):
    """Independent runs with seeds ``base_seed + i``; returns (runs, mean OSPA, box stats)."""
    if n_runs < 1:
        raise InvalidParam("n_runs must be >= 1")
    jobs = [(exp, i, base_seed + i) for i in range(n_runs)]
    workers = thread_count(n_threads)
    if workers == 1:
        runs = [_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_worker, jobs))
    good = [r.ospa for r in runs if r.error is None]
    mean = float(np.mean(good)) if good else float("nan")
    return runs, mean, box_stats(good)
