"""Sequential sensor-by-sensor estimator and the bootstrap baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from .association import (
    BetaResult,
    DaConfig,
    FlowSettings,
    PotentialSource,
    SensorScan,
    _range_diff,
    _range_loglik,
    birth_flow,
    clutter_intensity,
    da_fixed_point,
    flow_embedded_beta,
    measurement_update_gamma,
    new_ps_belief,
    new_ps_existence,
    new_ps_xi,
    normalizers,
    prune,
)
from .errors import InvalidParam, TdoaFlowError, ZeroMass
from .geometry import Box
from .gmm import GmmBelief, floor_cov

log = logging.getLogger(__name__)

# RNG stream purposes
_LEGACY, _BIRTH, _BOOT_LEGACY, _BOOT_BIRTH = 0, 1, 2, 3

PM_ROUGHEN = 1e-3  # m, jitter added to resampled bootstrap particles


@dataclass
class EstimatorConfig:
    """Everything the estimator needs besides the scans."""

    da: DaConfig
    roi: Box
    method: str = "GROMOV"  # PM | EDH | LEDH | GROMOV
    flow: Optional[FlowSettings] = None
    n_samples: int = 200_000  # PM only
    p_th: float = 0.5
    prune_threshold: float = 1e-3

    def __post_init__(self):
        self.method = self.method.upper()
        if self.method not in ("PM", "EDH", "LEDH", "GROMOV"):
            raise InvalidParam(f"unknown method {self.method!r}")
        if self.method != "PM" and self.flow is None:
            raise InvalidParam("flow settings are required for flow-based methods")
        if self.method == "PM" and self.n_samples < 1:
            raise InvalidParam("n_samples must be at least 1")


@dataclass
class EstimatorState:
    config: EstimatorConfig
    seed: int = 0
    sensors_done: List[int] = field(default_factory=list)
    sources: List[PotentialSource] = field(default_factory=list)
    next_id: int = 0


@dataclass
class SourceEstimate:
    position: np.ndarray
    existence: float
    ps_id: int


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, sensor, purpose, index) style keys."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def _diag(sensor, scan, J_prev, sources_before_prune, sources_after, da, failures=0, error=None):
    return {
        "sensor": int(sensor),
        "n_measurements": int(scan.n),
        "n_legacy": int(J_prev),
        "n_before_prune": int(len(sources_before_prune)),
        "n_after_prune": int(len(sources_after)),
        "bp_iterations": int(da.iterations) if da is not None else 0,
        "bp_converged": bool(da.converged) if da is not None else True,
        "flow_failures": int(failures),
        "n_detected": int(sum(ps.existence > 0.5 for ps in sources_after)),
        "error": error,
    }


def process_sensor(state: EstimatorState, scan: SensorScan, sensor: int):
    """Fold one sensor's scan into the state; returns (new state, diagnostics).

    A failure inside the sensor update leaves the state unchanged and is
    reported in the diagnostics.
    """
    if sensor in state.sensors_done:
        raise InvalidParam(f"sensor {sensor} already processed")
    cfg = state.config
    try:
        if cfg.method == "PM":
            return _process(state, scan, sensor, _bootstrap_parts)
        return _process(state, scan, sensor, _flow_parts)
    except TdoaFlowError as exc:
        log.warning("sensor %d update failed: %s", sensor, exc)
        new = replace(state, sensors_done=state.sensors_done + [sensor])
        return new, _diag(sensor, scan, len(state.sources), state.sources, state.sources, None,
                          error=f"{type(exc).__name__}: {exc}")


def _process(state, scan, sensor, parts):
    cfg = state.config
    legacy = state.sources
    J, M = len(legacy), scan.n
    betas, births, evidence, failures = parts(state, scan, sensor)
    xi0 = new_ps_xi(scan, cfg.da, cfg.roi, evidence=evidence)
    beta = np.array([b.beta for b in betas]).reshape(J, M + 1)
    da = da_fixed_point(beta, xi0, cfg.da)
    updated = []
    for j, ps in enumerate(legacy):
        try:
            if cfg.method == "PM":
                updated.append(_bootstrap_gamma(ps, da.kappa[j], betas[j], cfg.da))
            else:
                updated.append(measurement_update_gamma(ps, da.kappa[j], betas[j], scan, cfg.da))
        except ZeroMass as exc:
            log.debug("dropping PS %d: %s", ps.id, exc)
    if cfg.method == "PM":
        new = _bootstrap_new(scan, da.iota, xi0, births, cfg.da, state.next_id, sensor)
    else:
        new = new_ps_belief(scan, da.iota, cfg.da, cfg.roi, cfg.flow, births=births, xi0=xi0,
                            first_id=state.next_id, sensor=sensor)
    before = updated + new
    after = [ps for ps in prune(before, cfg.prune_threshold) if ps.existence > 0]
    new_state = replace(state, sensors_done=state.sensors_done + [sensor], sources=after,
                        next_id=state.next_id + M)
    return new_state, _diag(sensor, scan, J, before, after, da, failures)


def _flow_parts(state, scan, sensor):
    cfg = state.config
    betas = []
    failures = 0
    for j, ps in enumerate(state.sources):
        br = flow_embedded_beta(ps, scan, cfg.da, cfg.flow, stream(state.seed, sensor, _LEGACY, ps.id))
        failures += br.failures
        betas.append(br)
    births = []
    for m in range(scan.n):
        b = birth_flow(float(scan.z[m]), scan, cfg.da, cfg.roi, cfg.flow,
                       stream(state.seed, sensor, _BIRTH, m))
        failures += b.failures
        births.append(b)
    return betas, births, [b.evidence for b in births], failures


# ---------------------------------------------------------------------------
# Bootstrap (prior-message sampling) baseline


def _cloud(ps: PotentialSource):
    bel = ps.belief
    if bel.points is not None:
        return bel.points, bel.point_weights
    return bel.means, bel.weights


def _cloud_belief(pts, w):
    w = w / w.sum()
    mu = w @ pts
    d = pts - mu
    cov = floor_cov((w[:, None] * d).T @ d)
    return GmmBelief(mu[None], cov[None], np.ones(1), pts, w, np.zeros(pts.shape[0], dtype=np.int64))


def _bootstrap_parts(state, scan, sensor):
    cfg = state.config
    n = cfg.n_samples
    z_r = scan.z * cfg.da.medium.c
    c_m = normalizers(scan, cfg.da)
    R = cfg.da.r_var
    betas = []
    for ps in state.sources:
        rng = stream(state.seed, sensor, _BOOT_LEGACY, ps.id)
        pts, w = _cloud(ps)
        idx = rng.choice(pts.shape[0], size=n, p=w / w.sum())
        x0 = pts[idx] + PM_ROUGHEN * rng.standard_normal((n, 3))
        r = ps.existence
        w0 = np.full(n, r / n)
        h = _range_diff(x0, scan.pair)
        lr = cfg.da.p_d * np.exp(_range_loglik(z_r[:, None], h[None, :], R)) / c_m[:, None]
        beta = np.concatenate([[(1 - cfg.da.p_d) * r + (1 - r)], lr @ w0])
        betas.append(BetaResult(beta, x0[None], w0[None], [None] * scan.n, [lr]))
    births = []
    evidence = []
    for m in range(scan.n):
        rng = stream(state.seed, sensor, _BOOT_BIRTH, m)
        x = cfg.roi.sample(n, rng)
        f = np.exp(_range_loglik(z_r[m], _range_diff(x, scan.pair), R))
        births.append((x, f))
        evidence.append(float(f.mean()))
    return betas, births, evidence, 0


def _bootstrap_gamma(ps, kappa, br: BetaResult, cfg: DaConfig):
    r = ps.existence
    C = float(kappa @ br.beta)
    if not (np.isfinite(C) and C > 0):
        raise ZeroMass(f"PS {ps.id}: total belief mass {C!r}")
    existence = float(np.clip((C - kappa[0] * (1 - r)) / C, 0.0, 1.0))
    lr = br.contrib[0]
    g = kappa[0] * (1 - cfg.p_d) + kappa[1:] @ lr
    w = br.w0[0] * g
    if not w.sum() > 0:
        return PotentialSource(ps.id, ps.belief, existence, ps.origin)
    return PotentialSource(ps.id, _cloud_belief(br.x0[0], w), existence, ps.origin)


def bootstrap_update(state: EstimatorState, scan: SensorScan, sensor: int):
    """PM update of one sensor: prior sampling, likelihood weighting, no flow."""
    if state.config.method != "PM":
        state = replace(state, config=replace(state.config, method="PM"))
    return process_sensor(state, scan, sensor)


def _bootstrap_new(scan, iota, xi0, births, cfg: DaConfig, first_id, sensor):
    clutter = clutter_intensity(scan, cfg) / normalizers(scan, cfg)
    out = []
    for m in range(scan.n):
        x, f = births[m]
        if f.sum() > 0:
            bel = _cloud_belief(x[f > 0], f[f > 0])
            r = new_ps_existence(iota[m], xi0[m], clutter[m])
        else:
            bel = GmmBelief(np.zeros((1, 3)), np.eye(3)[None], np.ones(1))
            r = 0.0
        out.append(PotentialSource(first_id + m, bel, r, (sensor, m)))
    return out


# ---------------------------------------------------------------------------


def extract_estimates(state: EstimatorState, p_th: Optional[float] = None) -> List[SourceEstimate]:
    p_th = state.config.p_th if p_th is None else p_th
    out = []
    for ps in state.sources:
        if ps.existence > p_th:
            bel = ps.belief
            pos = bel.particle_mean() if bel.points is not None and bel.points.size else bel.mean()
            out.append(SourceEstimate(np.asarray(pos, dtype=float), float(ps.existence), ps.id))
    return out


def run_all_sensors(scans: Sequence[SensorScan], config: EstimatorConfig, seed: int,
                    on_sensor: Optional[Callable] = None):
    """Process every scan in order; returns (state, estimates, diagnostics)."""
    if len(scans) == 0:
        raise InvalidParam("at least one scan is required")
    state = EstimatorState(config, seed)
    diags = []
    for s, scan in enumerate(scans):
        state, d = process_sensor(state, scan, s)
        diags.append(d)
        if on_sensor is not None:
            on_sensor(s, state)
    return state, extract_estimates(state), diags
