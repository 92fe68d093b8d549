"""Experiment configuration: INI-style text with four sections.

Example::

    [scenario]
    roi_half_width = 1000
    n_sources = 5
    receivers = face_centers
    pairs = 1-2, 3-4, 5-6, 1-3, 2-4, 3-5, 4-6, 1-5, 2-6

    [model]
    c = 1500
    sigma_z = 0.001/1500
    p_d = 0.95
    mu_c = 1
    mu_b = 0.1
    p_th = 0.5
    prune_threshold = 0.001

    [method]
    method = GROMOV
    n_kernels = 100
    n_particles_legacy = 500
    n_particles_new = 30
    n_lambda = 30
    schedule = uniform

    [run]
    n_runs = 25
    base_seed = 0
    output_csv = results.csv
    summary_json = summary.json

``sigma_z`` is in seconds and may be written as a quotient, with ``c``
standing for the configured sound speed (``0.001/c``). Relative output
paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ParseError, ValidationError
from .geometry import DEFAULT_PAIRS

METHODS = ("PM", "EDH", "LEDH", "GROMOV")
FLOW_REQUIRED = ("n_kernels", "n_particles_legacy", "n_particles_new", "n_lambda")


@dataclass
class ScenarioSection:
    roi_half_width: float = 1000.0
    n_sources: int = 5
    receivers: Optional[List[Tuple[float, float, float]]] = None  # None = face centers
    pairs: List[Tuple[int, int]] = field(default_factory=lambda: list(DEFAULT_PAIRS))


@dataclass
class ModelSection:
    c: float = 1500.0
    sigma_z: float = 0.001 / 1500.0
    p_d: float = 0.95
    mu_c: float = 1.0
    mu_b: float = 0.1
    p_th: float = 0.5
    prune_threshold: float = 1e-3


@dataclass
class MethodSection:
    method: str = "GROMOV"
    n_kernels: Optional[int] = None
    n_particles_legacy: Optional[int] = None
    n_particles_new: Optional[int] = None
    n_lambda: Optional[int] = None
    schedule: str = "uniform"
    schedule_ratio: float = 1.2
    n_samples: Optional[int] = None
    kappa_spread: float = 1.0
    birth_cov_scale: float = 4.0
    curvature_inflation: bool = True


@dataclass
class RunSection:
    n_runs: int = 1
    base_seed: int = 0
    output_csv: str = "results.csv"
    summary_json: str = "summary.json"
    timings_csv: Optional[str] = None
    snapshot_dir: Optional[str] = None
    ospa_cutoff: float = 50.0
    ospa_order: float = 1.0


@dataclass
class ExperimentConfig:
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    model: ModelSection = field(default_factory=ModelSection)
    method: MethodSection = field(default_factory=MethodSection)
    run: RunSection = field(default_factory=RunSection)
    base_dir: str = "."

    # -- conversions ---------------------------------------------------
    def to_sections(self) -> Dict[str, Dict[str, str]]:
        """String form of every set field, suitable for re-parsing."""
        out = {}
        for name in ("scenario", "model", "method", "run"):
            sec = {}
            for key, val in asdict(getattr(self, name)).items():
                if val is None:
                    continue
                sec[key] = _format(key, val)
            out[name] = sec
        return out

    def to_ini(self) -> str:
        lines = []
        for name, sec in self.to_sections().items():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in sec.items())
            lines.append("")
        return "\n".join(lines)

    def path(self, p: Optional[str]) -> Optional[str]:
        if p is None:
            return None
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def experiment(self):
        """Build the ``sim.Experiment`` this config describes."""
        from .association import DaConfig, FlowSettings
        from .flow import FlowKind, lambda_schedule
        from .geometry import Box, Medium
        from .pipeline import EstimatorConfig
        from .sim import Experiment

        m, me, sc = self.model, self.method, self.scenario
        da = DaConfig(p_d=m.p_d, mu_c=m.mu_c, mu_b=m.mu_b, medium=Medium(m.c, m.sigma_z))
        roi = Box.cube(sc.roi_half_width)
        flow = None
        if me.method != "PM":
            flow = FlowSettings(
                FlowKind.parse(me.method),
                lambda_schedule(me.n_lambda, me.schedule, me.schedule_ratio),
                n_kernels=me.n_kernels,
                n_particles_legacy=me.n_particles_legacy,
                n_particles_new=me.n_particles_new,
                kappa_spread=me.kappa_spread,
                birth_cov_scale=me.birth_cov_scale,
                curvature_inflation=me.curvature_inflation,
            )
        est = EstimatorConfig(da, roi, me.method, flow,
                              n_samples=me.n_samples or 1, p_th=m.p_th,
                              prune_threshold=m.prune_threshold)
        rx = None if sc.receivers is None else np.asarray(sc.receivers, dtype=float)
        return Experiment(est, n_sources=sc.n_sources, pairs=list(sc.pairs), receivers=rx,
                          ospa_cutoff=self.run.ospa_cutoff, ospa_order=self.run.ospa_order)


def _format(key, val) -> str:
    if key == "pairs":
        return ", ".join(f"{a}-{b}" for a, b in val)
    if key == "receivers":
        return "; ".join(",".join(repr(float(c)) for c in p) for p in val)
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    return str(val)


# ---------------------------------------------------------------------------
# parsing


def _number(field_name, text, c=None) -> float:
    text = text.strip()
    parts = text.split("/")
    if len(parts) > 2:
        raise ValidationError(field_name, f"cannot parse {text!r} as a number")
    vals = []
    for p in parts:
        p = p.strip()
        if p == "c" and c is not None:
            vals.append(c)
            continue
        try:
            vals.append(float(p))
        except ValueError:
            raise ValidationError(field_name, f"cannot parse {text!r} as a number") from None
    if len(vals) == 2:
        if vals[1] == 0:
            raise ValidationError(field_name, "division by zero")
        return vals[0] / vals[1]
    return vals[0]


def _integer(field_name, text) -> int:
    v = _number(field_name, text)
    if v != int(v):
        raise ValidationError(field_name, f"expected an integer, got {text!r}")
    return int(v)


def _boolean(field_name, text) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValidationError(field_name, f"expected true/false, got {text!r}")


def _pairs(text) -> List[Tuple[int, int]]:
    out = []
    for tok in text.replace(";", ",").split(","):
        tok = tok.strip()
        if not tok:
            continue
        a, sep, b = tok.partition("-")
        if not sep:
            raise ValidationError("pairs", f"expected 'a-b', got {tok!r}")
        out.append((_integer("pairs", a), _integer("pairs", b)))
    if not out:
        raise ValidationError("pairs", "at least one pair is required")
    return out


def _receivers(text):
    if text.strip().lower() in ("face_centers", "default", ""):
        return None
    pts = []
    for tok in text.split(";"):
        tok = tok.strip()
        if not tok:
            continue
        xyz = [_number("receivers", v) for v in tok.split(",")]
        if len(xyz) != 3:
            raise ValidationError("receivers", f"expected x,y,z, got {tok!r}")
        pts.append(tuple(xyz))
    return pts


_KEYS = {
    "scenario": {
        "roi_half_width": _number, "n_sources": _integer,
        "receivers": None, "pairs": None,
    },
    "model": {
        "c": _number, "sigma_z": None, "p_d": _number, "mu_c": _number, "mu_b": _number,
        "p_th": _number, "prune_threshold": _number,
    },
    "method": {
        "method": None, "n_kernels": _integer, "n_particles_legacy": _integer,
        "n_particles_new": _integer, "n_lambda": _integer, "schedule": None,
        "schedule_ratio": _number, "n_samples": _integer, "kappa_spread": _number,
        "birth_cov_scale": _number, "curvature_inflation": _boolean,
    },
    "run": {
        "n_runs": _integer, "base_seed": _integer, "output_csv": None, "summary_json": None,
        "timings_csv": None, "snapshot_dir": None, "ospa_cutoff": _number, "ospa_order": _number,
    },
}


def config_from_sections(sections: Dict[str, Dict[str, str]], base_dir: str = ".") -> ExperimentConfig:
    for name, sec in sections.items():
        if name not in _KEYS:
            raise ValidationError(name, "unknown section")
        for key in sec:
            if key not in _KEYS[name]:
                raise ValidationError(f"{name}.{key}", "unknown key")
    get = lambda s, k: sections.get(s, {}).get(k)  # noqa: E731

    cfg = ExperimentConfig(base_dir=base_dir)
    for name, parsers in _KEYS.items():
        obj = getattr(cfg, name)
        for key, fn in parsers.items():
            raw = get(name, key)
            if raw is None or fn is None:
                continue
            setattr(obj, key, fn(key, raw))
    sc, mo, me, ru = cfg.scenario, cfg.model, cfg.method, cfg.run
    if get("scenario", "receivers") is not None:
        sc.receivers = _receivers(get("scenario", "receivers"))
    if get("scenario", "pairs") is not None:
        sc.pairs = _pairs(get("scenario", "pairs"))
    if get("model", "sigma_z") is not None:
        mo.sigma_z = _number("sigma_z", get("model", "sigma_z"), c=mo.c)
    if get("method", "method") is not None:
        me.method = get("method", "method").strip().upper()
    if get("method", "schedule") is not None:
        me.schedule = get("method", "schedule").strip().lower()
    for key in ("output_csv", "summary_json", "timings_csv", "snapshot_dir"):
        if get("run", key) is not None:
            setattr(ru, key, get("run", key).strip())
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Range and presence checks; raises ValidationError naming the field."""
    sc, mo, me, ru = cfg.scenario, cfg.model, cfg.method, cfg.run

    def need(ok, name, msg):
        if not ok:
            raise ValidationError(name, msg)

    need(sc.roi_half_width > 0, "roi_half_width", "must be > 0")
    need(sc.n_sources >= 0, "n_sources", "must be >= 0")
    n_rx = 6 if sc.receivers is None else len(sc.receivers)
    need(n_rx >= 2, "receivers", "at least two receivers are required")
    for a, b in sc.pairs:
        need(1 <= a <= n_rx and 1 <= b <= n_rx and a != b, "pairs",
             f"pair {a}-{b} must name two distinct receivers in 1..{n_rx}")
    need(mo.c > 0, "c", "must be > 0")
    need(mo.sigma_z > 0, "sigma_z", "must be > 0")
    need(0 < mo.p_d <= 1, "p_d", "must lie in (0, 1]")
    need(mo.mu_c >= 0, "mu_c", "must be >= 0")
    need(mo.mu_b >= 0, "mu_b", "must be >= 0")
    need(0 <= mo.p_th <= 1, "p_th", "must lie in [0, 1]")
    need(0 <= mo.prune_threshold < 1, "prune_threshold", "must lie in [0, 1)")
    need(me.method in METHODS, "method", f"must be one of {', '.join(METHODS)}")
    if me.method == "PM":
        need(me.n_samples is not None, "n_samples", "required for method PM")
        need(me.n_samples >= 1, "n_samples", "must be >= 1")
    else:
        for key in FLOW_REQUIRED:
            val = getattr(me, key)
            need(val is not None, key, f"required for method {me.method}")
            need(val >= 1, key, "must be >= 1")
        need(me.schedule in ("uniform", "geometric"), "schedule", "must be uniform or geometric")
        need(me.schedule_ratio > 0, "schedule_ratio", "must be > 0")
        need(me.kappa_spread > 0, "kappa_spread", "must be > 0")
        need(me.birth_cov_scale > 0, "birth_cov_scale", "must be > 0")
    need(ru.n_runs >= 1, "n_runs", "must be >= 1")
    need(ru.base_seed >= 0, "base_seed", "must be >= 0")
    need(ru.ospa_cutoff > 0, "ospa_cutoff", "must be > 0")
    need(ru.ospa_order >= 1, "ospa_order", "must be >= 1")


def parse_config(text: str, base_dir: str = ".") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParseError(str(exc).splitlines()[0]) from exc
    sections = {s: dict(cp.items(s)) for s in cp.sections()}
    return config_from_sections(sections, base_dir)


def load_config(path) -> ExperimentConfig:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from exc
    return parse_config(text, os.path.dirname(os.path.abspath(path)))
