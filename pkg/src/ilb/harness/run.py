"""Execute a configured run and persist its artifacts."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

from .. import meta
from ..core import (AggregateDataset, LearnedPolicy, MixturePolicy, NonStationaryPolicy,
                    SurrogateLoss, write_dataset)
from ..envs import make_env
from ..learners import LearnerConfig, write_model
from .config import ExperimentConfig

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "dataset_size", "train_loss", "val_loss", "env_metric", "beta_i")


class MetricsWriter:
    """Appends one row per iteration and flushes, so partial runs keep their rows."""

    def __init__(self, path: Path):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh)
        self.w.writerow(METRIC_COLUMNS)
        self.fh.flush()

    def row(self, r: dict):
        vals = []
        for c in METRIC_COLUMNS:
            v = r[c]
            vals.append(v if isinstance(v, int) else repr(float(v)))
        self.w.writerow(vals)
        self.fh.flush()

    def close(self):
        self.fh.close()


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("iteration", "dataset_size") else float(v))
             for k, v in r.items()} for r in rows]


def _save_policy(policy, path: Path):
    if isinstance(policy, LearnedPolicy):
        write_model(policy.model, path)
    elif isinstance(policy, MixturePolicy):
        # weights first, then one model file per learned component
        lines = []
        for k, (w, p) in enumerate(policy.components):
            if isinstance(p, LearnedPolicy):
                write_model(p.model, path.with_name(f"{path.name}.c{k}"))
                lines.append(f"{w!r} {path.name}.c{k}")
        path.write_text("ilb-mixture v1\n" + "\n".join(lines) + "\n")
    elif isinstance(policy, NonStationaryPolicy):
        lines = []
        for t, p in enumerate(policy.policies, start=1):
            if isinstance(p, LearnedPolicy):
                write_model(p.model, path.with_name(f"{path.name}.t{t}"))
                lines.append(f"{t} {path.name}.t{t}")
        path.write_text("ilb-nonstationary v1\n" + "\n".join(lines) + "\n")


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None):
    """Run ``config`` into ``out_dir`` (default ``<config.out>/<label>``).

    Writes ``config.snapshot``, ``metrics.csv`` (row by row), ``model_<i>``
    and ``dataset``. Returns the :class:`~ilb.meta.RunRecord`.
    """
    config.validate()
    out = Path(out_dir) if out_dir is not None else Path(config.out) / config.label()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(config.to_text())
    env = make_env(config.env, **config.env_options)
    expert = env.expert()
    learner = LearnerConfig(config.learner, config.lam, config.epochs, config.eta0)
    loss = SurrogateLoss(config.loss, env.action_spec)
    T = config.T or env.horizon
    writer = MetricsWriter(out / "metrics.csv")

    def on_iteration(i, row, policy):
        writer.row(row)
        _save_policy(policy, out / f"model_{i}")

    try:
        if config.algorithm in ("dagger", "supervised"):
            rec = meta.dagger_run(env, expert, learner, config.N, config.m, T,
                                  config.beta_schedule, loss, config.seed, m_val=config.m_val,
                                  eval_episodes=config.eval_episodes, on_iteration=on_iteration)
        elif config.algorithm == "smile":
            rec = meta.smile_run(env, expert, learner, config.N, config.m, T, config.alpha, loss,
                                 config.seed, m_val=config.m_val,
                                 eval_episodes=config.eval_episodes, on_iteration=on_iteration)
        elif config.algorithm == "searn_greedy":
            rec = meta.searn_greedy_run(env, expert, learner, config.N, config.m, T,
                                        config.alpha, loss, config.seed, m_val=config.m_val,
                                        eval_episodes=config.eval_episodes,
                                        on_iteration=on_iteration)
        else:
            rec = meta.forward_run(env, expert, learner, T, config.m, loss, config.seed,
                                   m_val=config.m_val, eval_episodes=config.eval_episodes,
                                   on_iteration=on_iteration)
    finally:
        writer.close()
    if rec.datasets:
        write_dataset(AggregateDataset.concat(rec.datasets), out / "dataset")
    rec.config_snapshot = dict(rec.config_snapshot, run_dir=str(out))
    last = rec.per_iteration_metrics[-1]
    best = min(range(len(rec.per_iteration_metrics)),
               key=lambda k: rec.per_iteration_metrics[k]["val_loss"]) + 1
    summary = (f"run {config.label()}: env={config.env} iterations={len(rec.policy_sequence)} "
               f"final_{env.primary_metric}={last['env_metric']:.6g} "
               f"best_val_iteration={best}")
    (out / "summary.txt").write_text(summary + "\n")
    log.info(summary)
    rec.summary = summary
    return rec


def metric_is_finite(rows) -> bool:
    return all(math.isfinite(r[c]) for r in rows for c in METRIC_COLUMNS)
