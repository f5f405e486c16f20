"""Exact finite-horizon analytics on tabular MDPs.

Everything here is a pure function of numpy arrays: state distributions,
expected cost, Q-values under a continuation policy, recoverability, L1
distance, and the small constructions used to exhibit compounding error.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (ActionSpec, Environment, ILBError, MixturePolicy, NonStationaryPolicy,
                   Policy, SchemaError, StateObs, TablePolicy)

ROW_TOL = 1e-12


class MDPError(ILBError, ValueError):
    pass


@dataclass
class TabularMDP:
    transition: np.ndarray  # (S, A, S)
    cost: np.ndarray  # (S, A), in [0, 1]
    initial_dist: np.ndarray  # (S,)
    horizon: int

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.cost = np.asarray(self.cost, dtype=float)
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        S, A = self.cost.shape
        if self.transition.shape != (S, A, S):
            raise MDPError(f"transition shape {self.transition.shape} != {(S, A, S)}")
        if self.initial_dist.shape != (S,):
            raise MDPError("initial distribution has wrong length")
        if np.any(self.transition < 0) or np.any(
                np.abs(self.transition.sum(axis=2) - 1.0) > ROW_TOL):
            raise MDPError("transition rows must be distributions")
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1.0) > ROW_TOL:
            raise MDPError("initial distribution must sum to 1")
        if np.any(self.cost < 0) or np.any(self.cost > 1):
            raise MDPError("costs must lie in [0, 1]")
        if self.horizon < 1:
            raise MDPError("horizon must be >= 1")

    @property
    def n_states(self) -> int:
        return self.cost.shape[0]

    @property
    def n_actions(self) -> int:
        return self.cost.shape[1]


@dataclass
class DistributionReport:
    per_step: np.ndarray  # (T, S); row t-1 is d^t
    average: np.ndarray  # (S,)


def as_table(policy, mdp: TabularMDP, features: np.ndarray | None = None) -> np.ndarray:
    """Time-indexed action probabilities ``(T, S, A)`` for any policy.

    Learned policies are evaluated on ``features`` (one-hot by default).
    """
    T, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    if isinstance(policy, np.ndarray):
        tab = np.asarray(policy, dtype=float)
    elif isinstance(policy, TablePolicy):
        tab = policy.table
    elif isinstance(policy, MixturePolicy):
        tab = sum(w * as_table(p, mdp, features) for w, p in policy.components)
    elif isinstance(policy, NonStationaryPolicy):
        tab = np.stack([as_table(policy.at(t), mdp, features)[t - 1] for t in range(1, T + 1)])
    elif isinstance(policy, Policy):
        phi = np.eye(S) if features is None else np.asarray(features, dtype=float)
        if policy.kind == "learned":
            acts = policy.act_batch(phi)
        else:
            acts = [policy.act(StateObs(features=phi[s], index=s, t=1)) for s in range(S)]
        tab = np.zeros((S, A))
        tab[np.arange(S), np.asarray(acts, dtype=int)] = 1.0
    else:
        raise SchemaError(f"cannot tabulate {policy!r}")
    if tab.ndim == 2:
        tab = np.broadcast_to(tab, (T,) + tab.shape)
    if tab.shape != (T, S, A):
        if tab.shape[1:] == (S, A) and tab.shape[0] >= 1:
            idx = np.minimum(np.arange(T), tab.shape[0] - 1)
            tab = tab[idx]
        else:
            raise SchemaError(f"policy table shape {tab.shape} incompatible with MDP {(T, S, A)}")
    if np.any(np.abs(tab.sum(axis=2) - 1.0) > ROW_TOL * 10):
        raise SchemaError("policy rows must sum to 1")
    return tab


def state_distributions(mdp: TabularMDP, policy, features=None) -> DistributionReport:
    pi = as_table(policy, mdp, features)
    T = mdp.horizon
    d = np.empty((T, mdp.n_states))
    d[0] = mdp.initial_dist
    for t in range(1, T):
        # d^{t+1}(s') = sum_s d^t(s) sum_a pi_t(a|s) P(s'|s,a)
        d[t] = np.einsum("s,sa,sap->p", d[t - 1], pi[t - 1], mdp.transition)
    return DistributionReport(d, d.mean(axis=0))


def expected_cost(mdp: TabularMDP, policy, features=None) -> float:
    """J(pi): expected total cost over the horizon."""
    pi = as_table(policy, mdp, features)
    dist = state_distributions(mdp, pi)
    c_pi = np.einsum("tsa,sa->ts", pi, mdp.cost)
    return float(np.sum(dist.per_step * c_pi))


def q_tables(mdp: TabularMDP, continuation, features=None) -> np.ndarray:
    """``Q[k, s, a]``: k-step cost of taking ``a`` in ``s`` at absolute time
    ``T - k + 1`` and then following ``continuation``. ``Q[0]`` is zero."""
    pi = as_table(continuation, mdp, features)
    T, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    Q = np.zeros((T + 1, S, A))
    V = np.zeros(S)
    for k in range(1, T + 1):
        Q[k] = mdp.cost + mdp.transition @ V
        V = np.sum(pi[T - k] * Q[k], axis=1)
    return Q


def q_value(mdp: TabularMDP, continuation, t_remaining: int, s: int, a) -> float:
    """Q^{continuation}_{t_remaining}(s, a); ``a`` may be an action index, an
    action-probability vector, or a policy (evaluated at time ``T - t_remaining + 1``)."""
    if not 1 <= t_remaining <= mdp.horizon:
        raise MDPError(f"t_remaining {t_remaining} outside [1, {mdp.horizon}]")
    Q = q_tables(mdp, continuation)[t_remaining, s]
    if isinstance(a, (int, np.integer)):
        return float(Q[a])
    if isinstance(a, np.ndarray) and a.ndim == 1:
        return float(np.dot(a, Q))
    probs = as_table(a, mdp)[mdp.horizon - t_remaining, s]
    return float(np.dot(probs, Q))


def recoverability_u(mdp: TabularMDP, expert, visited: DistributionReport,
                     features=None) -> float:
    """Largest one-step deviation cost ``Q_{T-t+1}(s, a) - Q_{T-t+1}(s, expert)``
    over times t, states reachable at t, and actions a."""
    Q = q_tables(mdp, expert, features)
    pi = as_table(expert, mdp, features)
    T = mdp.horizon
    u = 0.0
    for t in range(1, T + 1):
        k = T - t + 1
        reach = visited.per_step[t - 1] > 0
        if not np.any(reach):
            continue
        base = np.sum(pi[t - 1] * Q[k], axis=1)
        gap = Q[k][reach] - base[reach, None]
        u = max(u, float(gap.max()))
    return u


def tv_distance(p, q) -> float:
    """L1 distance ``sum |p_i - q_i|`` (in [0, 2] for distributions)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise SchemaError(f"length mismatch {p.shape} vs {q.shape}")
    return float(np.sum(np.abs(p - q)))


def deterministic_table(actions, n_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=int)
    tab = np.zeros(actions.shape + (n_actions,))
    np.put_along_axis(tab, actions[..., None], 1.0, axis=-1)
    return tab


def telescoping_terms(mdp: TabularMDP, policy, expert, features=None) -> np.ndarray:
    """Per-step terms ``E_{s~d^t_pi}[Q_{T-t+1}(s, pi) - Q_{T-t+1}(s, expert)]``;
    their sum equals ``J(pi) - J(expert)``."""
    pi = as_table(policy, mdp, features)
    pe = as_table(expert, mdp, features)
    Q = q_tables(mdp, pe)
    d = state_distributions(mdp, pi).per_step
    T = mdp.horizon
    out = np.empty(T)
    for t in range(1, T + 1):
        k = T - t + 1
        diff = np.sum(pi[t - 1] * Q[k], axis=1) - np.sum(pe[t - 1] * Q[k], axis=1)
        out[t - 1] = float(np.dot(d[t - 1], diff))
    return out


def disagreement(mdp: TabularMDP, policy, expert, features=None) -> np.ndarray:
    """``(T, S)`` probability that ``policy`` picks a different action than the
    (deterministic) expert."""
    pi = as_table(policy, mdp, features)
    pe = as_table(expert, mdp, features)
    return 1.0 - np.sum(pi * pe, axis=2)


def zero_one_under(mdp: TabularMDP, policy, expert, dist_policy=None, features=None) -> float:
    """``E_{s~d_{dist_policy}}[l_01(s, policy)]`` (defaults to the policy's own distribution)."""
    dist = state_distributions(mdp, policy if dist_policy is None else dist_policy, features)
    dis = disagreement(mdp, policy, expert, features)
    return float(np.sum(dist.per_step * dis) / mdp.horizon)


# --------------------------------------------------------------------------
# Constructions

def build_kaariainen_chain(T: int, eps: float):
    """Sequence prediction of a constant bit string with learner feedback.

    State = previously predicted bit (starts at the correct bit 0), action =
    predicted bit, cost 1 for a wrong bit. The expert always predicts the
    truth. The learner copies its previous output and flips it with
    probability ``eps``, so after an error it keeps erring until the next flip.
    """
    if not 0 < eps <= 0.5:
        raise MDPError("eps must lie in (0, 0.5]")
    P = np.zeros((2, 2, 2))
    P[:, 0, 0] = 1.0
    P[:, 1, 1] = 1.0
    C = np.array([[0.0, 1.0], [0.0, 1.0]])
    mdp = TabularMDP(P, C, np.array([1.0, 0.0]), T)
    expert = TablePolicy(deterministic_table([0, 0], 2))
    learner = TablePolicy(np.array([[1 - eps, eps], [eps, 1 - eps]]), kind="learned")
    return mdp, expert, learner


def kaariainen_mistakes(T: int, eps: float) -> float:
    """Closed-form expected mistakes of the chain learner over T steps."""
    return T / 2 - (1 - (1 - 2 * eps) ** (T + 1)) / (4 * eps) + 0.5


def build_quadratic_gap_example(T: int, eps: float, expert_cost: float = 0.0):
    """Instance where a learner with ``eps`` 0-1 loss on the expert's
    distribution pays ``(1 - eps*T) J(expert) + T^2 eps``.

    States: 0 start (visited only at t=1), 1 on-track, 2 off-track
    (absorbing, cost 1 per step). Action 0 keeps the kart on track at cost
    ``expert_cost``; action 1 leaves the track. The learner leaves the track
    from the start state with probability ``eps*T`` and is otherwise
    identical to the expert, so its average error under the expert's
    distribution is exactly ``eps``.
    """
    if eps < 0 or eps * T > 1:
        raise MDPError(f"need 0 <= eps*T <= 1, got eps={eps}, T={T}")
    c = float(expert_cost)
    P = np.zeros((3, 2, 3))
    P[0, 0, 1] = 1.0
    P[0, 1, 2] = 1.0
    P[1, 0, 1] = 1.0
    P[1, 1, 2] = 1.0
    P[2, :, 2] = 1.0
    C = np.array([[c, 1.0], [c, 1.0], [1.0, 1.0]])
    mdp = TabularMDP(P, C, np.array([1.0, 0.0, 0.0]), T)
    expert = TablePolicy(deterministic_table([0, 0, 0], 2))
    q = eps * T
    learner = TablePolicy(np.array([[1 - q, q], [1.0, 0.0], [1.0, 0.0]]), kind="learned")
    return mdp, expert, learner


HAZARD_FEATURES = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def build_hazard_track(T: int, eps: float):
    """Learnable compounding-error family.

    States: 0 on-track, 1 hazard, 2 off-track (cost 1 per step). From any
    on-track situation the next state is a hazard with probability ``eps``.
    Action 0 (forward) turns a hazard or off-track state into off-track;
    action 1 (steer) dodges the hazard / recovers to the track. Hazard and
    on-track states share the same features, so no linear policy can tell
    them apart; off-track has its own feature. The expert steers at hazards
    and off-track, so its demonstrations never show how to recover.

    Returns ``(mdp, expert, features)``.
    """
    if not 0 < eps < 1:
        raise MDPError("eps must lie in (0, 1)")
    P = np.zeros((3, 2, 3))
    track = np.array([1 - eps, eps, 0.0])
    P[0, 0] = P[0, 1] = track
    P[1, 1] = track
    P[1, 0, 2] = 1.0
    P[2, 1] = track
    P[2, 0, 2] = 1.0
    C = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    mdp = TabularMDP(P, C, track.copy(), T)
    expert = TablePolicy(deterministic_table([0, 1, 1], 2))
    return mdp, expert, HAZARD_FEATURES.copy()


def random_mdp(n_states: int, n_actions: int, T: int, rng, sparsity: float = 0.0) -> TabularMDP:
    rng = np.random.default_rng(rng)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if sparsity > 0:
        mask = rng.random(P.shape) < sparsity
        mask[..., 0] = False
        P = np.where(mask, 0.0, P)
        P /= P.sum(axis=2, keepdims=True)
    C = rng.random((n_states, n_actions))
    init = rng.dirichlet(np.ones(n_states))
    return TabularMDP(P, C, init, T)


def random_policy_table(n_states: int, n_actions: int, rng, T: int | None = None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    shape = (n_states,) if T is None else (T, n_states)
    return rng.dirichlet(np.ones(n_actions), size=shape)


# --------------------------------------------------------------------------
# Environment adapter

class TabularEnv(Environment):
    """Sampling environment over a :class:`TabularMDP`.

    States carry both the index (for table experts) and a feature row (for
    learned policies); features default to one-hot.
    """

    name = "tabular"
    primary_metric = "cost"

    def __init__(self, mdp: TabularMDP, expert: Policy, features: np.ndarray | None = None,
                 name: str = "tabular"):
        self.mdp = mdp
        self._expert = expert
        self.features = (np.eye(mdp.n_states) if features is None
                         else np.asarray(features, dtype=float))
        if self.features.shape[0] != mdp.n_states:
            raise SchemaError("feature map needs one row per state")
        self.feature_dim = self.features.shape[1]
        self.action_spec = ActionSpec("discrete", mdp.n_actions)
        self.horizon = mdp.horizon
        self.name = name
        self._s = 0
        self._t = 1
        self._rng = np.random.default_rng(0)

    def _obs(self) -> StateObs:
        return StateObs(features=self.features[self._s], index=self._s, t=self._t)

    def reset(self, rng):
        self._rng = rng
        self._s = int(rng.choice(self.mdp.n_states, p=self.mdp.initial_dist))
        self._t = 1
        return self._obs()

    def step(self, action):
        a = int(action)
        cost = float(self.mdp.cost[self._s, a])
        self._s = int(self._rng.choice(self.mdp.n_states, p=self.mdp.transition[self._s, a]))
        self._t += 1
        return self._obs(), cost, self._t > self.mdp.horizon

    def expert(self):
        return self._expert


# --------------------------------------------------------------------------
# File format

def write_mdp(mdp: TabularMDP, path: str | Path) -> None:
    S, A, T = mdp.n_states, mdp.n_actions, mdp.horizon
    lines = [f"ilb-mdp v1 S={S} A={A} T={T}",
             "init: " + " ".join(repr(float(x)) for x in mdp.initial_dist)]
    for s in range(S):
        for a in range(A):
            lines.append(f"P {s} {a}: " + " ".join(repr(float(x)) for x in mdp.transition[s, a]))
            lines.append(f"C {s} {a}: {float(mdp.cost[s, a])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_mdp(path: str | Path) -> TabularMDP:
    """Parse the ``ilb-mdp v1`` format; invalid instances (e.g. cost > 1) raise."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("ilb-mdp v1"):
        raise MDPError(f"{path}: missing 'ilb-mdp v1' header")
    try:
        hdr = dict(tok.split("=") for tok in lines[0].split()[2:])
        S, A, T = int(hdr["S"]), int(hdr["A"]), int(hdr["T"])
    except (KeyError, ValueError) as exc:
        raise MDPError(f"{path}: bad header") from exc
    P = np.full((S, A, S), np.nan)
    C = np.full((S, A), np.nan)
    init = None
    for lineno, line in enumerate(lines[1:], start=2):
        head, sep, body = line.partition(":")
        if not sep:
            raise MDPError(f"{path}:{lineno}: expected ':'")
        vals = [float(v) for v in body.split()]
        toks = head.split()
        if toks == ["init"]:
            init = np.array(vals)
        elif len(toks) == 3 and toks[0] in ("P", "C"):
            s, a = int(toks[1]), int(toks[2])
            if toks[0] == "P":
                P[s, a] = vals
            else:
                C[s, a] = vals[0]
        else:
            raise MDPError(f"{path}:{lineno}: unrecognized line")
    if init is None or np.isnan(P).any() or np.isnan(C).any():
        raise MDPError(f"{path}: incomplete MDP definition")
    return TabularMDP(P, C, init, T)
