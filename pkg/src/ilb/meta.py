"""Training meta-algorithms: DAgger, SMILe, SEARN-greedy, forward training and
supervised cloning, plus validation-based policy selection.

Sampled variants work on any :class:`~ilb.core.Environment`. ``dagger_exact``
is the infinite-sample variant for tabular MDPs, where every per-iteration
dataset is the exact state distribution of the executed policy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tabular
from .core import (ActionSpec, AggregateDataset, Environment, ILBError, LearnedPolicy,
                   MixturePolicy, NonStationaryPolicy, Policy, SchemaError, StateObs, SurrogateLoss,
                   beta_mixture, derive_seed, empirical_loss, label_with_expert, rollout)
from .learners import LearnerConfig, RegretLedger, ftl_train, hindsight_weights, regret_report

log = logging.getLogger(__name__)

FORWARD_MAX_T = 64


class ScheduleError(ILBError, ValueError):
    pass


class ForwardHorizonError(ILBError, ValueError):
    pass


@dataclass(frozen=True)
class BetaSchedule:
    """Probability of executing the expert at iteration i (1-based)."""

    kind: str = "indicator"  # indicator | geometric | constant
    p: float = 0.0

    def __post_init__(self):
        if self.kind not in ("indicator", "geometric", "constant"):
            raise ScheduleError(f"unknown schedule {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ScheduleError(f"schedule parameter {self.p} outside [0, 1]")

    @classmethod
    def parse(cls, text: str) -> "BetaSchedule":
        text = text.strip()
        if text == "indicator":
            return cls("indicator")
        kind, _, val = text.partition(":")
        try:
            return cls(kind, float(val))
        except ValueError as exc:
            raise ScheduleError(f"bad schedule {text!r}") from exc

    def __str__(self):
        return "indicator" if self.kind == "indicator" else f"{self.kind}:{self.p:g}"

    def beta(self, i: int) -> float:
        if self.kind == "indicator":
            return 1.0 if i == 1 else 0.0
        if self.kind == "geometric":
            return self.p ** (i - 1)
        return self.p

    def values(self, N: int) -> np.ndarray:
        return np.array([self.beta(i) for i in range(1, N + 1)])

    def mean(self, N: int) -> float:
        return float(self.values(N).mean())

    def n_beta(self, N: int, T: int) -> int:
        """Largest n <= N with beta_n > 1/T (0 if none)."""
        b = self.values(N)
        idx = np.nonzero(b > 1.0 / T)[0]
        return int(idx[-1] + 1) if len(idx) else 0

    def mixing_penalty(self, N: int, T: int, ell_max: float) -> float:
        """``(2 ell_max / N) [n_beta + T sum_{i > n_beta} beta_i]``."""
        nb = self.n_beta(N, T)
        tail = self.values(N)[nb:].sum()
        return 2.0 * ell_max / N * (nb + T * tail)

    def label(self) -> str:
        if self.kind == "indicator":
            return "D0"
        if self.kind == "geometric":
            return f"D{self.p:g}"
        return "Sup" if self.p == 1.0 else f"Dc{self.p:g}"


@dataclass
class RunRecord:
    """Outcome of one meta-algorithm run.

    ``policy_sequence`` holds the N test-time policies (for DAgger the policy
    trained after iteration i). ``learner_sequence`` holds the learned policy
    that was mixed in while collecting iteration i (the first may be None or
    an arbitrary initial policy) -- the online learner's plays.
    """

    policy_sequence: list
    per_iteration_metrics: list
    regret: RegretLedger | None = None
    config_snapshot: dict = field(default_factory=dict)
    learner_sequence: list = field(default_factory=list)
    datasets: list = field(default_factory=list, repr=False)
    mixtures: list = field(default_factory=list, repr=False)
    betas: list = field(default_factory=list)

    @property
    def aggregate(self) -> AggregateDataset | None:
        return AggregateDataset.concat(self.datasets) if self.datasets else None


# --------------------------------------------------------------------------
# Shared helpers

def collect(env: Environment, policy: Policy, expert: Policy, m: int, T: int,
            seed: int, iteration: int) -> tuple[AggregateDataset, list]:
    """m rollouts of ``policy`` with every visited state labeled by ``expert``."""
    ds = AggregateDataset(env.feature_dim, env.action_spec)
    trajs = []
    for j in range(1, m + 1):
        tr = rollout(env, policy, T, derive_seed(seed, iteration, j), expert=expert,
                     iteration=iteration)
        ds.add(label_with_expert(tr, expert))
        trajs.append(tr)
    return ds, trajs


def validation_loss(policy: Policy, env: Environment, loss: SurrogateLoss, m_val: int,
                    T: int, seed: int, expert: Policy | None = None) -> tuple[float, dict]:
    """Mean expert-disagreement loss over ``m_val`` rollouts of ``policy`` itself,
    and the mean episode metrics of those rollouts.

    The rollout seeds depend only on ``seed`` and the rollout index, so every
    candidate is scored on the same random streams.
    """
    expert = expert if expert is not None else env.expert()
    vals, rows = [], []
    for j in range(1, m_val + 1):
        tr = rollout(env, policy, T, derive_seed(seed, "val", j), expert=expert)
        if len(tr):
            X = np.array([s.state.features for s in tr.steps])
            y = np.array([s.expert_action for s in tr.steps])
            vals.append(loss.batch(policy, X, y))
        rows.append(tr.metrics)
    allv = np.concatenate(vals) if vals else np.zeros(1)
    metrics = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]} if rows else {}
    return float(allv.mean()), metrics


def assess(policy, env, loss, T, seed, m_val, eval_episodes, expert) -> dict:
    val, metrics = validation_loss(policy, env, loss, max(m_val, 1), T, seed, expert)
    if getattr(env, "custom_evaluation", False) or eval_episodes > 0:
        metrics = env.evaluate(policy, eval_episodes or m_val, derive_seed(seed, "eval"))
    return {"val_loss": val, "env_metric": float(metrics.get(env.primary_metric, math.nan)),
            "metrics": metrics}


def _snapshot(**kw) -> dict:
    return {k: (str(v) if not isinstance(v, (int, float, str)) else v) for k, v in kw.items()}


# --------------------------------------------------------------------------
# DAgger

def dagger_run(env: Environment, expert: Policy, learner: LearnerConfig, N: int, m: int,
               T: int, schedule: BetaSchedule, loss: SurrogateLoss, seed: int, *,
               m_val: int = 1, eval_episodes: int = 0, initial_policy: Policy | None = None,
               compute_regret: bool = True,
               on_iteration: Callable[[int, dict, Policy], None] | None = None) -> RunRecord:
    """Dataset aggregation.

    Iteration i executes ``beta_i * expert + (1 - beta_i) * learned_i`` (a fresh
    coin per step), labels every visited state with the expert, aggregates,
    and refits the base learner on everything collected so far.
    """
    if N < 1 or m < 1:
        raise ValueError("N and m must be >= 1")
    if initial_policy is None and schedule.beta(1) != 1.0:
        raise ScheduleError("beta_1 must be 1 when no initial policy is given")
    if expert.action_spec != env.action_spec:
        raise SchemaError("expert and environment action spaces differ")
    if initial_policy is not None and initial_policy.feature_dim not in (None, env.feature_dim):
        raise SchemaError("initial policy feature dimension does not match environment")
    current = initial_policy
    plays = []
    datasets = []
    trained = []
    metrics = []
    betas = []
    agg = AggregateDataset(env.feature_dim, env.action_spec)
    for i in range(1, N + 1):
        beta = schedule.beta(i)
        if beta >= 1.0:
            pi_i = expert
        elif beta <= 0.0:
            pi_i = current
        else:
            pi_i = beta_mixture(expert, current, beta)
        plays.append(current)
        d_i, _ = collect(env, pi_i, expert, m, T, seed, i)
        datasets.append(d_i)
        agg.extend(d_i)
        current = ftl_train(datasets, learner, derive_seed(seed, "fit", i))
        trained.append(current)
        row = {"iteration": i, "dataset_size": len(agg), "beta_i": beta,
               "train_loss": empirical_loss(current, agg, loss)}
        row.update(assess(current, env, loss, T, seed, m_val, eval_episodes, expert))
        metrics.append(row)
        betas.append(beta)
        log.info("dagger it=%d |D|=%d beta=%.3g train=%.4g val=%.4g metric=%.4g", i, len(agg),
                 beta, row["train_loss"], row["val_loss"], row["env_metric"])
        if on_iteration is not None:
            on_iteration(i, row, current)
    regret = None
    if compute_regret:
        first = plays[0] if plays[0] is not None else LearnedPolicy(
            learner.zero_model(env.feature_dim, env.action_spec), env.feature_dim)
        regret = regret_report(datasets, [first] + plays[1:], loss, learner,
                               derive_seed(seed, "hindsight"))
    snap = _snapshot(algorithm="dagger", schedule=schedule, N=N, m=m, T=T, seed=seed,
                     learner=learner.kind, lam=learner.lam, loss=loss.kind)
    return RunRecord(trained, metrics, regret, snap, plays, datasets, betas=betas)


def supervised_train(env: Environment, expert: Policy, learner: LearnerConfig, n_traj: int,
                     T: int, loss: SurrogateLoss, seed: int) -> Policy:
    """Behavior cloning: fit on ``n_traj`` expert rollouts (same streams as
    the first DAgger iteration)."""
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    d, _ = collect(env, expert, expert, n_traj, T, seed, 1)
    return ftl_train([d], learner, derive_seed(seed, "fit", 1))


def select_best_on_validation(record: RunRecord, env: Environment, loss: SurrogateLoss,
                              m_val: int, seed: int, T: int | None = None,
                              return_index: bool = False):
    """Candidate with the lowest expert-disagreement loss on ``m_val`` rollouts
    under its own state distribution; ties go to the earliest iteration."""
    if m_val < 1:
        raise ValueError("m_val must be >= 1")
    T = T or env.horizon
    losses = [validation_loss(p, env, loss, m_val, T, seed)[0] for p in record.policy_sequence]
    k = int(np.argmin(losses))
    if return_index:
        return record.policy_sequence[k], k, losses
    return record.policy_sequence[k]


# --------------------------------------------------------------------------
# SMILe / SEARN-greedy

def smile_weights(alpha: float, n: int) -> np.ndarray:
    """Mixture weights after n SMILe updates: [expert, pi_1, ..., pi_n]."""
    # expert weight in closed form; repeated subtraction can go slightly negative
    steps = [alpha * (1 - alpha) ** (j - 1) for j in range(1, n + 1)]
    return np.array([(1 - alpha) ** n] + steps)


def searn_weights(alpha: float, n: int) -> np.ndarray:
    """SEARN-greedy: the newest policy gets alpha, older components shrink by 1 - alpha."""
    w = np.array([1.0])
    for _ in range(n):
        w = np.append(w * (1 - alpha), alpha)
    return w


def smile_renormalize(mixture: MixturePolicy, alpha: float, n: int) -> Policy:
    """Drop the expert component and rescale the learned components to sum to 1."""
    if n < 1:
        raise ScheduleError("nothing to renormalize at iteration 0 (pure expert)")
    learned = [(w, p) for w, p in mixture.components if p.kind != "expert"]
    total = sum(w for w, _ in learned)
    if total <= 0:
        raise ScheduleError("mixture has no learned mass")
    comps = [(w / total, p) for w, p in learned]
    if len(comps) == 1:
        return comps[0][1]
    return MixturePolicy(comps)


def _mixture_run(name, weight_fn, env, expert, learner, N, m, T, alpha, loss, seed,
                 m_val, eval_episodes, on_iteration):
    if not 0 < alpha <= 1:
        raise ScheduleError("alpha must lie in (0, 1]")
    comps: list[Policy] = [expert]
    mixture: Policy = expert
    tests, metrics, mixtures, datasets = [], [], [], []
    total = 0
    for n in range(1, N + 1):
        d_n, _ = collect(env, mixture, expert, m, T, seed, n)
        datasets.append(d_n)
        total += len(d_n)
        comps.append(ftl_train([d_n], learner, derive_seed(seed, "fit", n)))
        w = weight_fn(alpha, n)
        live = [(float(wi), p) for wi, p in zip(w, comps) if wi > 0]
        s = sum(wi for wi, _ in live)
        live = [(wi / s, p) for wi, p in live]
        mixture = live[0][1] if len(live) == 1 else MixturePolicy(live)
        mixtures.append(mixture)
        test = (smile_renormalize(mixture, alpha, n) if isinstance(mixture, MixturePolicy)
                else mixture)
        tests.append(test)
        row = {"iteration": n, "dataset_size": total, "beta_i": float(w[0]),
               "train_loss": empirical_loss(test, d_n, loss)}
        row.update(assess(test, env, loss, T, seed, m_val, eval_episodes, expert))
        metrics.append(row)
        log.info("%s it=%d data=%d expert_w=%.3g val=%.4g metric=%.4g", name, n, total, w[0],
                 row["val_loss"], row["env_metric"])
        if on_iteration is not None:
            on_iteration(n, row, test)
    snap = _snapshot(algorithm=name, alpha=alpha, N=N, m=m, T=T, seed=seed,
                     learner=learner.kind, lam=learner.lam, loss=loss.kind)
    return RunRecord(tests, metrics, None, snap, comps[1:], datasets, mixtures,
                     betas=[float(r["beta_i"]) for r in metrics])


def smile_run(env, expert, learner, N, m, T, alpha, loss, seed, *, m_val=1,
              eval_episodes=0, on_iteration=None) -> RunRecord:
    """SMILe: iteration n adds ``alpha (1 - alpha)^(n-1)`` mass to the new policy,
    taken from the expert. Test-time policies are renormalized (no expert)."""
    return _mixture_run("smile", smile_weights, env, expert, learner, N, m, T, alpha, loss,
                        seed, m_val, eval_episodes, on_iteration)


def searn_greedy_run(env, expert, learner, N, m, T, alpha, loss, seed, *, m_val=1,
                     eval_episodes=0, on_iteration=None) -> RunRecord:
    """Mixture-weight variant of SEARN; ``alpha = 1`` is pure policy iteration."""
    return _mixture_run("searn_greedy", searn_weights, env, expert, learner, N, m, T, alpha,
                        loss, seed, m_val, eval_episodes, on_iteration)


# --------------------------------------------------------------------------
# Forward training

def forward_train(env: Environment, expert: Policy, learner: LearnerConfig, T: int, m: int,
                  loss: SurrogateLoss, seed: int,
                  on_step: Callable[[int, Policy, AggregateDataset], None] | None = None
                  ) -> NonStationaryPolicy:
    """One policy per time step; step t is fit on time-t states reached by the
    already-trained steps 1..t-1 (the expert acts from t on)."""
    if T > FORWARD_MAX_T:
        raise ForwardHorizonError(
            f"forward training trains one policy per step; T={T} > {FORWARD_MAX_T}. Use DAgger.")
    if T < 1 or m < 1:
        raise ValueError("T and m must be >= 1")
    policies: list[Policy] = []
    losses = []
    for t in range(1, T + 1):
        runner = NonStationaryPolicy(policies + [expert])
        ds = AggregateDataset(env.feature_dim, env.action_spec)
        for j in range(1, m + 1):
            tr = rollout(env, runner, t, derive_seed(seed, t, j), expert=expert, iteration=t)
            if len(tr) == t:
                ds.add(label_with_expert(tr, expert)[-1:])
        if len(ds) == 0:
            # every episode ended before t; the step is never executed
            policies.append(policies[-1] if policies else expert)
            losses.append(0.0)
        else:
            pol = ftl_train([ds], learner, derive_seed(seed, "fit", t))
            policies.append(pol)
            losses.append(empirical_loss(pol, ds, loss))
        if on_step is not None:
            on_step(t, policies[-1], ds)
    out = NonStationaryPolicy(policies)
    out.train_losses = losses
    return out


def forward_run(env, expert, learner, T, m, loss, seed, *, m_val=1, eval_episodes=0,
                on_iteration=None) -> RunRecord:
    """Forward training with per-step metrics; row t scores the policy that runs
    the trained steps 1..t and the expert afterwards."""
    metrics, datasets, total = [], [], [0]
    trained_steps: list[Policy] = []

    def on_step(t, pol, ds):
        trained_steps.append(pol)
        datasets.append(ds)
        total[0] += len(ds)
        current = NonStationaryPolicy(trained_steps + [expert])
        row = {"iteration": t, "dataset_size": total[0], "beta_i": 0.0,
               "train_loss": empirical_loss(pol, ds, loss) if len(ds) else 0.0}
        row.update(assess(current, env, loss, T, seed, m_val, eval_episodes, expert))
        metrics.append(row)
        if on_iteration is not None:
            on_iteration(t, row, current)

    final = forward_train(env, expert, learner, T, m, loss, seed, on_step=on_step)
    snap = _snapshot(algorithm="forward", T=T, m=m, seed=seed, learner=learner.kind,
                     lam=learner.lam, loss=loss.kind)
    seq = [NonStationaryPolicy(trained_steps[:t] + [expert]) for t in range(1, T)] + [final]
    return RunRecord(seq, metrics, None, snap, list(trained_steps), datasets)


# --------------------------------------------------------------------------
# Exact (infinite-sample) DAgger on tabular MDPs

@dataclass
class ExactRun:
    mdp: tabular.TabularMDP
    expert: Policy
    features: np.ndarray
    loss: SurrogateLoss
    schedule: BetaSchedule
    learner_sequence: list  # pi_hat_1 .. pi_hat_N (pi_hat_1 arbitrary)
    policy_sequence: list  # pi_hat_2 .. pi_hat_{N+1}
    datasets: list
    betas: np.ndarray
    regret: RegretLedger

    def state_losses(self, policy: Policy) -> np.ndarray:
        """Per-state loss ``l(s, policy)`` against the expert label."""
        S = self.mdp.n_states
        labels = np.array([self.expert.act(StateObs(features=self.features[s], index=s))
                           for s in range(S)])
        return self.loss.batch(policy, self.features, labels)

    def own_loss(self, policy: Policy) -> float:
        """``E_{s ~ d_policy}[l(s, policy)]`` computed exactly."""
        d = tabular.state_distributions(self.mdp, policy, self.features).average
        return float(np.dot(d, self.state_losses(policy)))

    def cost(self, policy: Policy) -> float:
        return tabular.expected_cost(self.mdp, policy, self.features)

    def bound_rhs(self) -> float:
        """``eps_hat_N + gamma_N + (2 l_max / N)[n_beta + T sum_{i>n_beta} beta_i]``."""
        N = len(self.datasets)
        pen = self.schedule.mixing_penalty(N, self.mdp.horizon, self.loss.ell_max)
        return self.regret.best_in_hindsight_loss + self.regret.avg_regret + pen


def exact_dataset(mdp, expert, features, dist_policy, iteration) -> AggregateDataset:
    """All states weighted by the exact average distribution of ``dist_policy``."""
    d = tabular.state_distributions(mdp, dist_policy, features).average
    keep = np.nonzero(d > 0)[0]
    labels = [expert.act(StateObs(features=features[s], index=int(s))) for s in keep]
    ds = AggregateDataset(features.shape[1], ActionSpec("discrete", mdp.n_actions))
    ds.add_arrays(features[keep], labels, iteration, 0, d[keep])
    return ds


def dagger_exact(mdp: tabular.TabularMDP, expert: Policy, learner: LearnerConfig, N: int,
                 schedule: BetaSchedule, loss: SurrogateLoss,
                 features: np.ndarray | None = None, seed: int = 0) -> ExactRun:
    """DAgger where dataset i is the exact distribution ``d_{pi_i}``.

    The first learned policy is the learner's all-zero model; with beta_1 = 1
    it is never executed but it is part of the online learner's sequence.
    """
    features = np.eye(mdp.n_states) if features is None else np.asarray(features, float)
    spec = ActionSpec("discrete", mdp.n_actions)
    current: Policy = LearnedPolicy(learner.zero_model(features.shape[1], spec), features.shape[1])
    plays, trained, datasets = [], [], []
    betas = schedule.values(N)
    for i in range(1, N + 1):
        beta = float(betas[i - 1])
        if beta >= 1.0:
            pi_i = expert
        elif beta <= 0.0:
            pi_i = current
        else:
            pi_i = MixturePolicy([(beta, expert), (1.0 - beta, current)])
        plays.append(current)
        datasets.append(exact_dataset(mdp, expert, features, pi_i, i))
        # FTL over iterations: every iteration's distribution carries equal mass
        agg = AggregateDataset.concat(datasets)
        agg = agg.with_weights(hindsight_weights(datasets))
        current = LearnedPolicy(learner.fit(agg, derive_seed(seed, "fit", i)), features.shape[1])
        trained.append(current)
    regret = regret_report(datasets, plays, loss, learner, derive_seed(seed, "hindsight"))
    return ExactRun(mdp, expert, features, loss, schedule, plays, trained, datasets, betas,
                    regret)
