"""Command-line driver: ``tdoaflow run | validate | ospa``.

Per-run CSV columns (fixed order)::

    run_id,seed,ospa,cardinality_true,cardinality_est,wall_seconds

``wall_seconds`` is left empty in that file so reruns are byte-identical;
measured times are written to the timings CSV and the summary JSON.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from .config import config_from_sections, load_config
from .errors import ConfigError, TdoaFlowError
from .sim import monte_carlo, ospa, thread_count

CSV_HEADER = ["run_id", "seed", "ospa", "cardinality_true", "cardinality_est", "wall_seconds"]

log = logging.getLogger("tdoaflow")


def results_csv(runs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in runs:
        w.writerow([r.run_id, r.seed, repr(float(r.ospa)), r.cardinality_true, r.cardinality_est, ""])
    return buf.getvalue()


def timings_csv(runs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_id", "wall_seconds"])
    for r in runs:
        w.writerow([r.run_id, f"{r.wall_seconds:.6f}"])
    return buf.getvalue()


def summary(cfg, runs, mean, box) -> dict:
    good = [r.ospa for r in runs if r.error is None]
    return {
        "config": cfg.to_sections(),
        "method": cfg.method.method,
        "n_runs": len(runs),
        "n_failed": sum(r.error is not None for r in runs),
        "mean_ospa": mean,
        "median_ospa": float(np.median(good)) if good else None,
        "box": box,
        "runs": [
            {
                "run_id": r.run_id,
                "seed": r.seed,
                "ospa": r.ospa,
                "cardinality_true": r.cardinality_true,
                "cardinality_est": r.cardinality_est,
                "wall_seconds": r.wall_seconds,
                "error": r.error,
                "diagnostics": r.diagnostics,
            }
            for r in runs
        ],
    }


def _write(path, text):
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def run_experiment(cfg, n_threads=None) -> int:
    exp = cfg.experiment()
    exp.snapshots = cfg.run.snapshot_dir is not None
    runs, mean, box = monte_carlo(exp, cfg.run.n_runs, cfg.run.base_seed, thread_count(n_threads))
    csv_path = cfg.path(cfg.run.output_csv)
    _write(csv_path, results_csv(runs))
    timing_path = cfg.path(cfg.run.timings_csv) if cfg.run.timings_csv else (
        os.path.splitext(csv_path)[0] + ".timings.csv")
    _write(timing_path, timings_csv(runs))
    _write(cfg.path(cfg.run.summary_json), json.dumps(summary(cfg, runs, mean, box), indent=2) + "\n")
    if exp.snapshots:
        snap_dir = cfg.path(cfg.run.snapshot_dir)
        for r in runs:
            doc = {"run_id": r.run_id, "seed": r.seed, "truth": r.truth.tolist(),
                   "estimates": r.estimates.tolist(), "sensors": r.snapshots or []}
            _write(os.path.join(snap_dir, f"run_{r.run_id:04d}.json"), json.dumps(doc) + "\n")
    failed = [r for r in runs if r.error is not None]
    for r in failed:
        log.error("run %d failed: %s", r.run_id, r.error)
    print(f"{cfg.method.method}: {len(runs)} runs, mean OSPA {mean:.4f} m -> {csv_path}")
    return 1 if len(failed) == len(runs) else 0


def read_points(path) -> np.ndarray:
    """x,y,z rows from a CSV file; a non-numeric first row is taken as a header."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            row = [c.strip() for c in row if c.strip()]
            if not row:
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if i == 0:
                    continue
                raise ConfigError(f"{path}: line {i + 1} is not numeric") from None
            if len(vals) != 3:
                raise ConfigError(f"{path}: line {i + 1} needs 3 columns, got {len(vals)}")
            rows.append(vals)
    return np.array(rows, dtype=float).reshape(-1, 3)


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    return run_experiment(cfg, args.threads)


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    # the echoed form must validate too
    config_from_sections(cfg.to_sections(), cfg.base_dir)
    print(f"{args.config}: ok ({cfg.method.method}, {cfg.run.n_runs} runs)")
    return 0


def _cmd_ospa(args) -> int:
    d = ospa(read_points(args.estimated), read_points(args.truth), args.cutoff, args.order)
    print(repr(d))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdoaflow", description="Multi-source TDOA localization experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the Monte-Carlo experiment described by a config file")
    r.add_argument("config")
    r.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: $TDOAFLOW_THREADS or 1)")
    r.set_defaults(func=_cmd_run)
    v = sub.add_parser("validate", help="parse and validate a config file")
    v.add_argument("config")
    v.set_defaults(func=_cmd_validate)
    o = sub.add_parser("ospa", help="OSPA distance between two x,y,z CSV point files")
    o.add_argument("estimated")
    o.add_argument("truth")
    o.add_argument("--cutoff", type=float, default=50.0)
    o.add_argument("--order", type=float, default=1.0)
    o.set_defaults(func=_cmd_ospa)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"tdoaflow: config error: {exc}", file=sys.stderr)
        return 2
    except (TdoaFlowError, OSError) as exc:
        print(f"tdoaflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
