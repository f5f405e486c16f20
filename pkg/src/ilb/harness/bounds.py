"""Exact checks of the performance inequalities on tabular instances.

Each suite returns a :class:`BoundReport`; a row passes iff
``lhs <= rhs + 1e-9``.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import tabular
from ..core import (ActionSpec, AggregateDataset, LearnedPolicy, MixturePolicy, StateObs,
                    SurrogateLoss, TablePolicy, derive_seed, label_with_expert, rollout)
from ..learners import LearnerConfig, ftl_train
from ..meta import BetaSchedule, dagger_exact, forward_train

TOL = 1e-9
SUITES = ("compounding", "forward", "lemma_tv", "dagger_regret", "concentration")
REPORT_COLUMNS = ("instance_id", "theorem_id", "lhs", "rhs", "slack", "pass", "wall_time")


@dataclass
class BoundRow:
    instance_id: str
    theorem_id: str
    lhs: float
    rhs: float
    wall_time: float = 0.0

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs + TOL


@dataclass
class BoundReport:
    suite: str
    rows: list[BoundRow] = field(default_factory=list)

    @property
    def all_pass(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def failures(self) -> list[BoundRow]:
        return [r for r in self.rows if not r.passed]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r.instance_id, r.theorem_id, repr(r.lhs), repr(r.rhs),
                            repr(r.slack), int(r.passed), f"{r.wall_time:.6f}"])


class _Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.dt = time.perf_counter() - self.t0


# --------------------------------------------------------------------------
# Instances

def random_instances(n: int = 3, seed: int = 7):
    """Small random MDPs with a deterministic expert and a stochastic learner."""
    out = []
    for k in range(n):
        rng = np.random.default_rng(derive_seed(seed, "inst", k))
        S, A, T = 4 + k, 2 + k % 2, 6 + 2 * k
        mdp = tabular.random_mdp(S, A, T, rng, sparsity=0.3)
        expert = TablePolicy(tabular.deterministic_table(rng.integers(A, size=S), A))
        learner = TablePolicy(tabular.random_policy_table(S, A, rng), kind="learned")
        out.append((f"random{k}_S{S}A{A}T{T}", mdp, expert, learner))
    return out


def _compounding_row(name, mdp, expert, learner, features=None):
    with _Timer() as tm:
        J = tabular.expected_cost(mdp, learner, features)
        Js = tabular.expected_cost(mdp, expert, features)
        eps = tabular.zero_one_under(mdp, learner, expert, dist_policy=expert, features=features)
        T = mdp.horizon
    return BoundRow(name, "compounding:J(pi)-J*<=T^2 eps", J - Js, T * T * eps, tm.dt)


def suite_compounding() -> BoundReport:
    rep = BoundReport("compounding")
    mdp, expert, learner = tabular.build_quadratic_gap_example(10, 0.05)
    rep.rows.append(_compounding_row("quadratic_gap_T10_eps0.05", mdp, expert, learner))
    for T, eps in [(5, 0.1), (20, 0.02), (40, 0.025)]:
        mdp, expert, learner = tabular.build_quadratic_gap_example(T, eps, expert_cost=0.3)
        rep.rows.append(_compounding_row(f"quadratic_gap_T{T}_eps{eps}_c0.3", mdp, expert,
                                         learner))
    for T, eps in [(10, 0.05), (25, 0.1)]:
        mdp, expert, learner = tabular.build_kaariainen_chain(T, eps)
        rep.rows.append(_compounding_row(f"kaariainen_T{T}_eps{eps}", mdp, expert, learner))
    for name, mdp, expert, learner in random_instances():
        rep.rows.append(_compounding_row(name, mdp, expert, learner))
    return rep


def _forward_row(name, mdp, expert, policy, features=None):
    with _Timer() as tm:
        J = tabular.expected_cost(mdp, policy, features)
        Js = tabular.expected_cost(mdp, expert, features)
        visited = tabular.state_distributions(mdp, policy, features)
        u = tabular.recoverability_u(mdp, expert, visited, features)
        eps = tabular.zero_one_under(mdp, policy, expert, features=features)
    return BoundRow(name, "forward:J(pi)<=J*+uT eps", J, Js + u * mdp.horizon * eps, tm.dt)


def suite_forward() -> BoundReport:
    """Forward-trained policies (one per step) checked with exact DP."""
    rep = BoundReport("forward")
    lc = LearnerConfig("ridge", 1e-6)
    mdp, expert, chain_learner = tabular.build_kaariainen_chain(6, 0.1)
    rep.rows.append(_forward_row("kaariainen_T6_eps0.1_chain_learner", mdp, expert,
                                 chain_learner))
    for T, eps in [(6, 0.1), (10, 0.05)]:
        mdp, expert, phi = tabular.build_hazard_track(T, eps)
        env = tabular.TabularEnv(mdp, expert, phi)
        pol = forward_train(env, expert, lc, T, 40, SurrogateLoss("squared", env.action_spec),
                            derive_seed(1, "fwd", T))
        rep.rows.append(_forward_row(f"hazard_T{T}_eps{eps}_forward", mdp, expert, pol, phi))
    for name, mdp, expert, learner in random_instances():
        env = tabular.TabularEnv(mdp, expert)
        pol = forward_train(env, expert, lc, mdp.horizon, 30,
                            SurrogateLoss("squared", env.action_spec), derive_seed(2, name))
        rep.rows.append(_forward_row(name + "_forward", mdp, expert, pol))
        rep.rows.append(_forward_row(name + "_stochastic", mdp, expert, learner))
    return rep


def suite_lemma_tv(n_beta: int = 101) -> BoundReport:
    """``||d_{pi_i} - d_{hat pi_i}||_1 <= min(2, 2 T beta)`` over a beta grid."""
    rep = BoundReport("lemma_tv")
    inst = random_instances(3)
    mdp, expert, phi = tabular.build_hazard_track(8, 0.1)
    inst.append(("hazard_T8_eps0.1", mdp, expert, TablePolicy(
        tabular.deterministic_table([0, 0, 0], 2), kind="learned")))
    for name, mdp, expert, learner in inst:
        d_hat = tabular.state_distributions(mdp, learner).average
        for beta in np.linspace(0.0, 1.0, n_beta):
            with _Timer() as tm:
                mix = MixturePolicy([(beta, expert), (1 - beta, learner)])
                d_mix = tabular.state_distributions(mdp, mix).average
                lhs = tabular.tv_distance(d_mix, d_hat)
            rhs = min(2.0, 2.0 * mdp.horizon * beta)
            rep.rows.append(BoundRow(f"{name}_beta{beta:.2f}", "lemma_tv", lhs, rhs, tm.dt))
    return rep


def dagger_regret_instances():
    """Instances for the exact DAgger inequality: (name, mdp, expert, features)."""
    out = []
    mdp, expert, phi = tabular.build_hazard_track(10, 0.05)
    out.append(("hazard_T10_eps0.05", mdp, expert, phi))
    mdp, expert, _ = tabular.build_kaariainen_chain(10, 0.1)
    out.append(("kaariainen_T10", mdp, expert, np.eye(2)))
    for name, mdp, expert, _ in random_instances(2):
        rng = np.random.default_rng(derive_seed(3, name))
        # aliased features make the expert imperfectly learnable
        phi = rng.integers(0, 2, size=(mdp.n_states, 2)).astype(float)
        out.append((name + "_aliased", mdp, expert, phi))
    return out


def dagger_regret_row(name, mdp, expert, phi, N, schedule, lam=1e-6):
    loss = SurrogateLoss("squared", ActionSpec("discrete", mdp.n_actions))
    with _Timer() as tm:
        run = dagger_exact(mdp, expert, LearnerConfig("ridge", lam), N, schedule, loss, phi)
        own = [run.own_loss(p) for p in run.learner_sequence]
        lhs = min(own)
        rhs = run.bound_rhs()
    return BoundRow(f"{name}_N{N}_{schedule}", "dagger_regret", lhs, rhs, tm.dt), run


def suite_dagger_regret(N: int = 32) -> BoundReport:
    rep = BoundReport("dagger_regret")
    for name, mdp, expert, phi in dagger_regret_instances():
        for sched in (BetaSchedule("indicator"), BetaSchedule("geometric", 0.5)):
            row, _ = dagger_regret_row(name, mdp, expert, phi, N, sched)
            rep.rows.append(row)
    return rep


def azuma_bound(ell_max: float, m: int, N: int, delta: float) -> float:
    return ell_max * math.sqrt(2 * math.log(1 / delta) / (m * N))


def concentration_deviations(reps: int = 200, N: int = 4, m: int = 5, T: int = 10,
                             eps: float = 0.1, seed: int = 11) -> tuple[np.ndarray, float]:
    """Sampled DAgger on the hazard track; per repetition, the mean exact loss
    of each played policy minus its mean per-trajectory sampled loss.

    Returns the deviations and ``ell_max``.
    """
    mdp, expert, phi = tabular.build_hazard_track(T, eps)
    env = tabular.TabularEnv(mdp, expert, phi)
    spec = env.action_spec
    loss = SurrogateLoss("squared", spec)
    lc = LearnerConfig("ridge", 1e-6)
    labels = np.array([expert.act(StateObs(features=phi[s], index=s)) for s in range(3)])
    devs = np.empty(reps)
    for r in range(reps):
        rs = derive_seed(seed, "rep", r)
        played = LearnedPolicy(lc.zero_model(env.feature_dim, spec), env.feature_dim)
        datasets = []
        gaps = []
        for i in range(1, N + 1):
            runner = expert if i == 1 else played
            exact_d = tabular.state_distributions(mdp, runner, phi).average
            per_state = loss.batch(played, phi, labels)
            exact = float(np.dot(exact_d, per_state))
            sampled = []
            d_i = AggregateDataset(env.feature_dim, spec)
            for j in range(1, m + 1):
                tr = rollout(env, runner, T, derive_seed(rs, i, j), expert=expert)
                X = np.array([s.state.features for s in tr.steps])
                y = np.array([s.expert_action for s in tr.steps])
                sampled.append(float(loss.batch(played, X, y).mean()))
                d_i.add(label_with_expert(tr, expert))
            datasets.append(d_i)
            gaps.append(exact - np.mean(sampled))
            played = ftl_train(datasets, lc, derive_seed(rs, "fit", i))
        devs[r] = float(np.mean(gaps))
    return devs, loss.ell_max


def suite_concentration(reps: int = 200, delta: float = 0.1, tolerance: float = 0.05,
                        N: int = 4, m: int = 5) -> BoundReport:
    """Failure rate of the Azuma-Hoeffding deviation bound over repetitions.

    One row: lhs = fraction of repetitions whose deviation exceeds the bound,
    rhs = delta + tolerance (binomial slack for a finite number of repetitions).
    """
    rep = BoundReport("concentration")
    with _Timer() as tm:
        devs, ell_max = concentration_deviations(reps, N, m)
        bound = azuma_bound(ell_max, m, N, delta)
        rate = float(np.mean(devs > bound))
    rep.rows.append(BoundRow(f"hazard_T10_N{N}_m{m}_reps{reps}", "azuma_hoeffding",
                             rate, delta + tolerance, tm.dt))
    return rep


def verify_bounds(suite: str) -> BoundReport:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    return {"compounding": suite_compounding, "forward": suite_forward,
            "lemma_tv": suite_lemma_tv, "dagger_regret": suite_dagger_regret,
            "concentration": suite_concentration}[suite]()
