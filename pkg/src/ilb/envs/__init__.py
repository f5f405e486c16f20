"""Environment registry and per-run metric series."""

from __future__ import annotations

import numpy as np

from .. import tabular
from ..core import Environment, ILBError
from .platformer import PlatformerConfig, PlatformerEnv, generate_stage, planner_expert
from .racer import RacerConfig, RacerEnv, Track, default_track, pure_pursuit_expert
from .seqlabel import SeqLabelEnv, load_ocr, ocr_corpus_from_env, synth_glyphs


class UnknownEnvError(ILBError, ValueError):
    pass


def _fields(cls, opts):
    known = set(cls.__dataclass_fields__)
    bad = sorted(set(opts) - known)
    if bad:
        raise UnknownEnvError(f"unknown option(s) {bad} for {cls.__name__}")
    return cls(**opts)


def make_env(name: str, **opts) -> Environment:
    """Build an environment by name.

    racer, platformer: options are fields of RacerConfig / PlatformerConfig
    (racer also takes ``width``). seqlabel: ``words``, ``noise``,
    ``alphabet_size``, ``seed``, ``bigram``, ``successors``, ``test_fold``,
    ``use_previous`` (real data from $ILB_OCR_PATH when set). hazard, quadratic_gap, kaariainen: ``T``
    and ``eps``. mdp: ``path`` to an ilb-mdp file with deterministic expert
    ``expert`` (comma-separated actions per state).
    """
    opts = dict(opts)
    if name == "racer":
        width = float(opts.pop("width", 2.0))
        return RacerEnv(default_track(width=width), _fields(RacerConfig, opts))
    if name == "platformer":
        return PlatformerEnv(_fields(PlatformerConfig, opts))
    if name == "seqlabel":
        test_fold = int(opts.pop("test_fold", 0))
        use_prev = bool(opts.pop("use_previous", True))
        synth = {"n_words": int(opts.pop("words", 600)), "noise": float(opts.pop("noise", 0.40)),
                 "alphabet_size": int(opts.pop("alphabet_size", 26)),
                 "seed": int(opts.pop("seed", 0)),
                 "bigram_concentration": float(opts.pop("bigram", 1.0)),
                 "successors": int(opts.pop("successors", 2))}
        if opts:
            raise UnknownEnvError(f"unknown option(s) {sorted(opts)} for seqlabel")
        words, folds = ocr_corpus_from_env(**synth)
        return SeqLabelEnv(words, folds, test_fold, synth["alphabet_size"], use_prev)
    if name in ("hazard", "quadratic_gap", "kaariainen"):
        T = int(opts.pop("T", 10))
        eps = float(opts.pop("eps", 0.05))
        if opts:
            raise UnknownEnvError(f"unknown option(s) {sorted(opts)} for {name}")
        if name == "hazard":
            mdp, expert, phi = tabular.build_hazard_track(T, eps)
            return tabular.TabularEnv(mdp, expert, phi, name)
        if name == "quadratic_gap":
            mdp, expert, _ = tabular.build_quadratic_gap_example(T, eps)
        else:
            mdp, expert, _ = tabular.build_kaariainen_chain(T, eps)
        return tabular.TabularEnv(mdp, expert, name=name)
    if name == "mdp":
        mdp = tabular.read_mdp(opts.pop("path"))
        acts = [int(a) for a in str(opts.pop("expert", "")).split(",") if a.strip()]
        if len(acts) != mdp.n_states:
            raise UnknownEnvError("mdp env needs expert=<one action per state>")
        from ..core import TablePolicy
        return tabular.TabularEnv(mdp, TablePolicy(tabular.deterministic_table(acts,
                                                                               mdp.n_actions)))
    raise UnknownEnvError(f"unknown environment {name!r}")


def env_metrics(record, env: Environment) -> dict[str, np.ndarray]:
    """Per-iteration series: cumulative data, the env's primary metric, losses."""
    rows = record.per_iteration_metrics
    return {
        "iteration": np.array([r["iteration"] for r in rows]),
        "cumulative_data": np.array([r["dataset_size"] for r in rows], dtype=float),
        env.primary_metric: np.array([r["env_metric"] for r in rows]),
        "train_loss": np.array([r["train_loss"] for r in rows]),
        "val_loss": np.array([r["val_loss"] for r in rows]),
    }


__all__ = ["make_env", "env_metrics", "RacerEnv", "RacerConfig", "Track", "default_track",
           "pure_pursuit_expert", "PlatformerEnv", "PlatformerConfig", "generate_stage",
           "planner_expert", "SeqLabelEnv", "load_ocr", "synth_glyphs", "UnknownEnvError"]
