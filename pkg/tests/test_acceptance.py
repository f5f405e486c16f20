"""End-to-end acceptance checks, one test per criterion.

Each test records a ``CRITERION k PASS|FAIL`` line that is printed in the
terminal summary (and immediately, when run with ``-s``).
"""

import math
import os
import time

import numpy as np
import pytest
from conftest import CRITERIA

from ilb import tabular
from ilb.core import ActionSpec, SurrogateLoss
from ilb.envs import PlatformerEnv, RacerEnv, make_env
from ilb.envs.seqlabel import OCR_ENV_VAR, load_ocr
from ilb.harness.bounds import (dagger_regret_instances, dagger_regret_row, suite_concentration,
                                suite_lemma_tv)
from ilb.harness.curve import mean_ci
from ilb.learners import LearnerConfig
from ilb.meta import BetaSchedule, dagger_exact, dagger_run

TOL = 1e-9
SEEDS = range(5)
RIDGE = LearnerConfig("ridge", 1e-6)


def report(k: int, ok: bool, detail: str, seconds: float, limit: float):
    ok = bool(ok) and seconds < limit
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} ({seconds:.1f}s < {limit:g}s) {detail}"
    CRITERIA.append(line)
    print(line)
    assert ok, line


def slope(x, y):
    return float(np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)[0])


# 1 -----------------------------------------------------------------------------------

def test_criterion_1_chain_closed_form():
    t0 = time.perf_counter()
    worst = 0.0
    for T in range(2, 26):
        for eps in (0.05, 0.1, 0.25, 0.5):
            mdp, _, learner = tabular.build_kaariainen_chain(T, eps)
            exact = tabular.expected_cost(mdp, learner)
            closed = T / 2 - (1 - (1 - 2 * eps) ** (T + 1)) / (4 * eps) + 0.5
            worst = max(worst, abs(exact - closed))
    report(1, worst <= TOL, f"max |DP - closed form| = {worst:.2e}",
           time.perf_counter() - t0, 5)


# 2 -----------------------------------------------------------------------------------

def test_criterion_2_quadratic_gap_tight():
    t0 = time.perf_counter()
    T, eps = 10, 0.05
    slacks = []
    for c in (0.0, 0.3):
        mdp, expert, learner = tabular.build_quadratic_gap_example(T, eps, expert_cost=c)
        J, Js = tabular.expected_cost(mdp, learner), tabular.expected_cost(mdp, expert)
        measured = tabular.zero_one_under(mdp, learner, expert, dist_policy=expert)
        slacks.append(abs((J - Js) - (T * T * measured - measured * T * Js)))
        slacks.append(abs(measured - eps))
    report(2, max(slacks) <= TOL, f"max slack = {max(slacks):.2e}", time.perf_counter() - t0, 1)


# 3 -----------------------------------------------------------------------------------

def test_criterion_3_mixture_tv_bound():
    t0 = time.perf_counter()
    rep = suite_lemma_tv(101)
    n_inst = len({r.instance_id.rsplit("_beta", 1)[0] for r in rep.rows})
    ok = rep.all_pass and n_inst >= 3 and len(rep.rows) == 101 * n_inst
    report(3, ok, f"{len(rep.rows)} rows over {n_inst} instances, "
           f"{len(rep.failures)} violations", time.perf_counter() - t0, 10)


# 4 -----------------------------------------------------------------------------------

def test_criterion_4_regret_inequality_end_to_end():
    t0 = time.perf_counter()
    rows = []
    for name, mdp, expert, phi in dagger_regret_instances():
        for sched in (BetaSchedule("indicator"), BetaSchedule("geometric", 0.5)):
            row, _ = dagger_regret_row(name, mdp, expert, phi, 32, sched)
            rows.append(row)
    worst = min(r.slack for r in rows)
    report(4, all(r.passed for r in rows), f"{len(rows)} instances, min slack = {worst:.4g}",
           time.perf_counter() - t0, 60)


# 5 -----------------------------------------------------------------------------------

def test_criterion_5_growth_exponents():
    t0 = time.perf_counter()
    Ts = [5, 10, 20, 40]
    gap_sup, gap_dag = [], []
    for T in Ts:
        mdp, expert, phi = tabular.build_hazard_track(T, 0.01)
        loss = SurrogateLoss("squared", ActionSpec("discrete", 2))
        run = dagger_exact(mdp, expert, RIDGE, 20, BetaSchedule("indicator"), loss, phi)
        Js = tabular.expected_cost(mdp, expert, phi)
        own = [run.own_loss(p) for p in run.policy_sequence]
        best = run.policy_sequence[int(np.argmin(own))]
        gap_sup.append(run.cost(run.policy_sequence[0]) - Js)  # fit on d_expert only
        gap_dag.append(run.cost(best) - Js)
    k_sup = slope(np.log(Ts), np.log(gap_sup))
    k_dag = slope(np.log(Ts), np.log(gap_dag))
    report(5, k_sup >= 1.8 and k_dag <= 1.2,
           f"exponent supervised = {k_sup:.3f} (>= 1.8), DAgger = {k_dag:.3f} (<= 1.2)",
           time.perf_counter() - t0, 300)


# 6 -----------------------------------------------------------------------------------

def test_criterion_6_racer_falls():
    t0 = time.perf_counter()
    env = RacerEnv()
    lc = LearnerConfig("ridge", 3.0)
    loss = SurrogateLoss("squared", env.action_spec)
    curves = {}
    for name, sched in (("dagger", BetaSchedule("indicator")),
                        ("supervised", BetaSchedule("constant", 1.0))):
        curves[name] = np.array([
            [r["env_metric"] for r in dagger_run(env, env.expert(), lc, 20, 1, env.horizon,
                                                 sched, loss, s, m_val=8,
                                                 compute_regret=False).per_iteration_metrics]
            for s in SEEDS]).mean(axis=0)
    dag, sup = curves["dagger"], curves["supervised"]
    ratio = dag[14] / sup[14]
    its = np.arange(1, 21)
    dag_slope = slope(its[4:], dag[4:])
    sup_drift = abs(slope(its, sup) * 19)
    ok = ratio <= 0.2 and dag_slope <= 0 and sup_drift <= 0.25 * sup.mean()
    report(6, ok, f"falls/lap at it15 DAgger/supervised = {ratio:.3f} (<= 0.2); "
           f"DAgger slope it5-20 = {dag_slope:.4f} (<= 0); supervised drift = "
           f"{sup_drift:.3f} (<= {0.25 * sup.mean():.3f})", time.perf_counter() - t0, 600)


# 7 -----------------------------------------------------------------------------------

def test_criterion_7_platformer_stuck():
    t0 = time.perf_counter()
    env = PlatformerEnv()
    lc = LearnerConfig("svm", 1e-3, epochs=10)
    loss = SurrogateLoss("hinge", env.action_spec)
    out = {}
    for name, sched in (("dagger", BetaSchedule("indicator")),
                        ("supervised", BetaSchedule("constant", 1.0))):
        out[name] = [dagger_run(env, env.expert(), lc, 20, 1, env.horizon, sched, loss, s,
                                m_val=20, compute_regret=False).per_iteration_metrics
                     for s in SEEDS]
    n_val = 20
    sup_stuck = [round(run[-1]["metrics"]["stuck"] * n_val) for run in out["supervised"]]
    dag_stuck = [round(r["metrics"]["stuck"] * n_val) for run in out["dagger"]
                 for r in run[9:]]
    d_dag = mean_ci([run[-1]["metrics"]["distance"] for run in out["dagger"]])
    d_sup = mean_ci([run[-1]["metrics"]["distance"] for run in out["supervised"]])
    ok = min(sup_stuck) >= 1 and max(dag_stuck) == 0 and d_dag[1] > d_sup[2]
    report(7, ok, f"supervised stuck episodes per seed {sup_stuck} (each >= 1); DAgger stuck "
           f"episodes at it>=10: {sum(dag_stuck)}; distance DAgger {d_dag[0]:.1f} "
           f"[{d_dag[1]:.1f}, {d_dag[2]:.1f}] vs supervised {d_sup[0]:.1f} "
           f"[{d_sup[1]:.1f}, {d_sup[2]:.1f}]", time.perf_counter() - t0, 600)


# 8 -----------------------------------------------------------------------------------

OCR_SYNTH = dict(words=6000, noise=0.40, bigram=1.0, successors=2)
OCR_TARGETS = {"no_structure": 0.82, "supervised": 0.836, "dagger": 0.855}


def ocr_accuracies(seed: int, **env_opts) -> dict:
    env = make_env("seqlabel", seed=seed, **env_opts)
    flat = make_env("seqlabel", seed=seed, use_previous=False, **env_opts)
    lc = LearnerConfig("allpairs", 1e-2, epochs=5)
    acc = {}
    for name, e, sched in (("no_structure", flat, BetaSchedule("constant", 1.0)),
                           ("supervised", env, BetaSchedule("constant", 1.0)),
                           ("dagger", env, BetaSchedule("indicator"))):
        rec = dagger_run(e, e.expert(), lc, 10, 600, e.horizon, sched,
                         SurrogateLoss("hinge", e.action_spec), seed, compute_regret=False)
        acc[name] = rec.per_iteration_metrics[-1]["env_metric"]
    return acc


def test_criterion_8_ocr_ordering():
    t0 = time.perf_counter()
    real = os.environ.get(OCR_ENV_VAR)
    if real:
        words, _ = load_ocr(real)
        n_chars = sum(len(w) for w in words)
        acc = ocr_accuracies(0)
        order = acc["no_structure"] < acc["supervised"] < acc["dagger"]
        close = all(abs(acc[k] - v) <= 0.02 for k, v in OCR_TARGETS.items())
        ok = order and close and abs(len(words) - 6600) <= 100 and n_chars > 52000
        detail = f"real data ({len(words)} words, {n_chars} chars): " + ", ".join(
            f"{k} {v:.4f}" for k, v in acc.items())
    else:
        runs = [ocr_accuracies(s, **OCR_SYNTH) for s in SEEDS]
        mean = {k: float(np.mean([r[k] for r in runs])) for k in OCR_TARGETS}
        ok = mean["no_structure"] < mean["supervised"] < mean["dagger"]
        detail = "synthetic glyphs, 5 seeds: " + ", ".join(f"{k} {v:.4f}"
                                                           for k, v in mean.items())
    report(8, ok, detail, time.perf_counter() - t0, 1800)


@pytest.mark.skipif(not os.environ.get(OCR_ENV_VAR),
                    reason=f"real OCR data absent (set {OCR_ENV_VAR} to run)")
def test_real_ocr_corpus_size():
    words, folds = load_ocr(os.environ[OCR_ENV_VAR])
    assert abs(len(words) - 6600) <= 100
    assert sum(len(w) for w in words) > 52000
    assert set(folds.tolist()) == set(range(10))


# 9 -----------------------------------------------------------------------------------

def test_criterion_9_regret_decay():
    t0 = time.perf_counter()
    Ns = (4, 8, 16, 32)
    ok, parts = True, []
    for name, mdp, expert, phi in dagger_regret_instances():
        loss = SurrogateLoss("squared", ActionSpec("discrete", mdp.n_actions))
        g = [dagger_exact(mdp, expert, RIDGE, N, BetaSchedule("indicator"), loss,
                          phi).regret.avg_regret for N in Ns]
        c = g[0] * Ns[0] / (1 + math.log(Ns[0]))  # fitted at the smallest N
        ok &= all(gn <= c * (1 + math.log(N)) / N + TOL for gn, N in zip(g, Ns))
        parts.append(f"{name}: N*gamma_N = " + "/".join(f"{gn * N:.3f}"
                                                       for gn, N in zip(g, Ns)))
    report(9, ok, "; ".join(parts), time.perf_counter() - t0, 60)


# 10 ----------------------------------------------------------------------------------

def test_criterion_10_concentration():
    t0 = time.perf_counter()
    rep = suite_concentration(reps=200, delta=0.1, tolerance=0.05)
    (row,) = rep.rows
    report(10, row.passed, f"failure rate {row.lhs:.3f} (<= {row.rhs:.2f}) over 200 repetitions",
           time.perf_counter() - t0, 300)
