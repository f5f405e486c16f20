"""Learning curves across seeds: metric vs cumulative data with Student-t CIs."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np
from scipy import stats

from ..core import ILBError
from .config import ExperimentConfig, parse_pairs
from .run import read_metrics

CHECKPOINTS = (1, 5, 10, 15, 20)
CURVE_COLUMNS = ("method", "cumulative_data", "metric_mean", "ci95_low", "ci95_high")


class CurveError(ILBError, ValueError):
    pass


def read_snapshot(run_dir: str | Path) -> dict:
    text = (Path(run_dir) / "config.snapshot").read_text()
    return {k: v for k, v, _ in parse_pairs(text)}


def method_label(snap: dict) -> str:
    """Run label with any ``_s<seed>`` suffix removed."""
    name = snap.get("name") or ""
    if not name:
        cfg = ExperimentConfig(algorithm=snap["algorithm"], schedule=snap["schedule"],
                               alpha=float(snap["alpha"]))
        return cfg.label()
    head, sep, tail = name.rpartition("_s")
    return head if sep and tail.isdigit() else name


def mean_ci(values, level: float = 0.95) -> tuple[float, float, float]:
    v = np.asarray(values, dtype=float)
    mean = float(v.mean())
    if len(v) < 2:
        return mean, mean, mean
    se = float(v.std(ddof=1) / np.sqrt(len(v)))
    half = float(stats.t.ppf(0.5 + level / 2, len(v) - 1)) * se
    return mean, mean - half, mean + half


def learning_curve(run_dirs, checkpoints=CHECKPOINTS) -> list[tuple]:
    """Rows ``(method, cumulative_data, mean, lo, hi)`` per method and checkpoint."""
    if not run_dirs:
        raise CurveError("no run directories given")
    envs = set()
    groups: dict[str, list[list[dict]]] = defaultdict(list)
    for d in run_dirs:
        snap = read_snapshot(d)
        envs.add((snap.get("env"), tuple(sorted((k, v) for k, v in snap.items()
                                               if k.startswith("env.")))))
        groups[method_label(snap)].append(read_metrics(Path(d) / "metrics.csv"))
    if len(envs) > 1:
        raise CurveError(f"runs use different environments: {sorted(e[0] for e in envs)}")
    rows = []
    for method in sorted(groups):
        runs = groups[method]
        for it in checkpoints:
            hits = [next((r for r in run if r["iteration"] == it), None) for run in runs]
            hits = [h for h in hits if h is not None]
            if not hits:
                continue
            data = float(np.mean([h["dataset_size"] for h in hits]))
            mean, lo, hi = mean_ci([h["env_metric"] for h in hits])
            rows.append((method, data, mean, lo, hi))
    return rows


def emit_learning_curve(run_dirs, out: str | Path, checkpoints=CHECKPOINTS) -> list[tuple]:
    rows = learning_curve(run_dirs, checkpoints)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for method, data, mean, lo, hi in rows:
            w.writerow([method, repr(data), repr(mean), repr(lo), repr(hi)])
    return rows
