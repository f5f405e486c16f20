"""Shared domain model: states, actions, policies, trajectories, datasets, losses.

Also holds the rollout and expert-labeling machinery every meta-algorithm uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np


class ILBError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(ILBError, ValueError):
    """State/action shapes do not match what a policy or learner expects."""


class InvalidActionError(ILBError):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


class EmptyDatasetError(ILBError, ValueError):
    pass


class MixtureError(ILBError, ValueError):
    pass


# --------------------------------------------------------------------------
# RNG discipline

def derive_seed(master: int, *key: int | str) -> int:
    """64-bit child seed for ``key`` under ``master`` (counter-based split).

    Strings in ``key`` are hashed stably so callers can name streams
    (``derive_seed(s, "val", i, j)``).
    """
    parts = []
    for k in key:
        if isinstance(k, str):
            parts.append(int.from_bytes(k.encode()[:8].ljust(8, b"\0"), "little"))
        else:
            parts.append(int(k))
    ss = np.random.SeedSequence(int(master) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(parts))
    lo, hi = ss.generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)


def as_rng(rng: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


# --------------------------------------------------------------------------
# States and actions

@dataclass(frozen=True, eq=False)
class StateObs:
    """What a policy observes at one time step.

    ``internal`` is an opaque simulator snapshot that only experts read
    (planners and pure-pursuit controllers see the true state); it is never
    written to datasets.
    """

    features: np.ndarray | None = None
    index: int | None = None
    t: int = 1
    internal: Any = None

    def __post_init__(self):
        if self.features is None and self.index is None:
            raise SchemaError("StateObs needs features or a tabular index")


@dataclass(frozen=True)
class ActionSpec:
    """Schema of an action space: ``discrete`` with ``size`` labels, or
    ``continuous`` with ``size`` dimensions bounded in ``[low, high]``."""

    kind: str
    size: int
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind not in ("discrete", "continuous"):
            raise SchemaError(f"unknown action kind {self.kind!r}")
        if self.size < 1:
            raise SchemaError("action size must be >= 1")

    @property
    def discrete(self) -> bool:
        return self.kind == "discrete"

    @property
    def span(self) -> float:
        return self.high - self.low

    def validate(self, action) -> Any:
        """Return ``action`` in canonical form (int or clipped float array)."""
        if self.discrete:
            if isinstance(action, (np.ndarray, list, tuple)):
                raise SchemaError("discrete action space expects an integer label")
            a = int(action)
            if not 0 <= a < self.size or a != action:
                raise SchemaError(f"label {action!r} outside [0, {self.size})")
            return a
        a = np.asarray(action, dtype=float).reshape(-1)
        if a.shape != (self.size,):
            raise SchemaError(f"expected {self.size}-dim action, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise SchemaError("non-finite continuous action")
        return np.clip(a, self.low, self.high)

    def header(self) -> str:
        return f"{self.kind}:{self.size}"

    @classmethod
    def parse(cls, text: str) -> "ActionSpec":
        kind, _, size = text.partition(":")
        try:
            return cls(kind, int(size))
        except ValueError as exc:
            raise SchemaError(f"bad action spec {text!r}") from exc


def same_action(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return bool(np.array_equal(np.asarray(a, float), np.asarray(b, float)))
    return a == b


# --------------------------------------------------------------------------
# Policies

class Policy:
    """Base policy. Subclasses set ``kind`` to learned, expert or mixture."""

    kind = "expert"
    action_spec: ActionSpec
    feature_dim: int | None = None

    def act(self, state: StateObs, rng: np.random.Generator | None = None):
        raise NotImplementedError

    def check_state(self, state: StateObs) -> None:
        if self.feature_dim is None:
            return
        if state.features is None:
            raise SchemaError(f"{type(self).__name__} needs feature vectors")
        if state.features.shape != (self.feature_dim,):
            raise SchemaError(
                f"feature dim {state.features.shape} != expected ({self.feature_dim},)")

    def raw(self, X: np.ndarray) -> np.ndarray | None:
        """Real-valued outputs on a feature batch, or None if the policy has none."""
        return None

    def act_batch(self, X: np.ndarray) -> list:
        return [self.act(StateObs(features=x), None) for x in X]


class ExpertPolicy(Policy):
    """Deterministic expert backed by a callable ``state -> action``."""

    kind = "expert"

    def __init__(self, fn: Callable[[StateObs], Any], action_spec: ActionSpec,
                 name: str = "expert"):
        self.fn = fn
        self.action_spec = action_spec
        self.name = name

    def act(self, state, rng=None):
        return self.action_spec.validate(self.fn(state))

    def __repr__(self):
        return f"ExpertPolicy({self.name})"


class TablePolicy(Policy):
    """Lookup-table policy over tabular state indices.

    ``table`` is either ``(S, A)`` or time-indexed ``(T, S, A)`` action
    probabilities. One-hot rows make the policy deterministic.
    """

    def __init__(self, table: np.ndarray, kind: str = "expert"):
        table = np.asarray(table, dtype=float)
        if table.ndim not in (2, 3):
            raise SchemaError("table must be (S, A) or (T, S, A)")
        self.table = table
        self.kind = kind
        self.action_spec = ActionSpec("discrete", table.shape[-1])

    def probs(self, s: int, t: int = 1) -> np.ndarray:
        if self.table.ndim == 3:
            return self.table[min(t, self.table.shape[0]) - 1, s]
        return self.table[s]

    def act(self, state, rng=None):
        if state.index is None:
            raise SchemaError("TablePolicy needs a tabular index")
        p = self.probs(state.index, state.t)
        if np.max(p) == 1.0:
            return int(np.argmax(p))
        if rng is None:
            raise SchemaError("stochastic table policy needs an rng")
        return int(rng.choice(len(p), p=p))


class LearnedPolicy(Policy):
    """Deterministic policy wrapping a fitted linear model."""

    kind = "learned"

    def __init__(self, model, feature_dim: int | None = None):
        self.model = model
        self.action_spec = model.action_spec
        self.feature_dim = feature_dim if feature_dim is not None else model.dim

    def act(self, state, rng=None):
        self.check_state(state)
        return self.model.decode(self.model.raw(state.features[None, :])[0])

    def raw(self, X):
        return self.model.raw(X)

    def act_batch(self, X):
        return self.model.decode_batch(self.model.raw(X))

    def __repr__(self):
        return f"LearnedPolicy({type(self.model).__name__})"


class NonStationaryPolicy(Policy):
    """One policy per time step; steps past the end reuse the last policy."""

    kind = "learned"

    def __init__(self, policies: Sequence[Policy]):
        if not policies:
            raise SchemaError("non-stationary policy needs at least one step")
        self.policies = list(policies)
        self.action_spec = self.policies[0].action_spec

    def at(self, t: int) -> Policy:
        return self.policies[min(max(t, 1), len(self.policies)) - 1]

    def act(self, state, rng=None):
        return self.at(state.t).act(state, rng)


class MixturePolicy(Policy):
    """Finite mixture; a component is drawn independently at every step.

    Two-component mixtures built with :func:`beta_mixture` draw through
    :func:`mixture_step_choice` so the per-step coin is observable.
    """

    kind = "mixture"

    def __init__(self, components: Sequence[tuple[float, Policy]], beta: float | None = None):
        if not components:
            raise MixtureError("empty mixture")
        w = np.array([c[0] for c in components], dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise MixtureError(f"mixture weights must be >= 0 and sum to 1, got {w.tolist()}")
        self.components = [(float(wi), p) for wi, (_, p) in zip(w, components)]
        self.weights = w
        self.beta = beta
        self.action_spec = self.components[0][1].action_spec

    def pick(self, rng: np.random.Generator) -> Policy:
        if self.beta is not None:
            side = mixture_step_choice(self.beta, rng)
            return self.components[0 if side == "expert" else 1][1]
        u = rng.random()
        acc = 0.0
        for w, p in self.components:
            acc += w
            if u < acc:
                return p
        return self.components[-1][1]

    def act(self, state, rng=None):
        if rng is None:
            raise SchemaError("mixture policies need an rng")
        return self.pick(rng).act(state, rng)


def beta_mixture(expert: Policy, learned: Policy, beta: float) -> Policy:
    """``beta * expert + (1 - beta) * learned`` with degenerate cases collapsed."""
    if not 0.0 <= beta <= 1.0:
        raise MixtureError(f"beta {beta} outside [0, 1]")
    return MixturePolicy([(beta, expert), (1.0 - beta, learned)], beta=beta)


def act(policy: Policy, state: StateObs, rng: np.random.Generator | None = None):
    """Dispatch to ``policy``; learned and expert policies ignore ``rng``."""
    return policy.act(state, rng)


def mixture_step_choice(beta: float, rng: np.random.Generator) -> str:
    """Per-step coin for a beta-mixture: ``"expert"`` with probability ``beta``."""
    if not 0.0 <= beta <= 1.0 or math.isnan(beta):
        raise MixtureError(f"beta {beta} outside [0, 1]")
    return "expert" if rng.random() < beta else "learned"


# --------------------------------------------------------------------------
# Environments

class Environment:
    """Interface consumed by :func:`rollout`.

    ``reset`` takes its own generator; ``step`` must be a pure function of
    the current state, the action and that generator.
    """

    name = "env"
    action_spec: ActionSpec
    feature_dim: int
    horizon: int
    primary_metric = "cost"

    def reset(self, rng: np.random.Generator) -> StateObs:
        raise NotImplementedError

    def step(self, action) -> tuple[StateObs, float, bool]:
        raise NotImplementedError

    def episode_metrics(self) -> dict[str, float]:
        return {}

    def expert(self) -> Policy:
        raise NotImplementedError

    def evaluate(self, policy: Policy, episodes: int, seed: int) -> dict[str, float]:
        """Mean episode metrics of ``policy`` over ``episodes`` seeded rollouts."""
        rows = [rollout(self, policy, self.horizon, derive_seed(seed, "eval", k)).metrics
                for k in range(episodes)]
        return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


# --------------------------------------------------------------------------
# Trajectories

@dataclass(frozen=True, eq=False)
class Step:
    state: StateObs
    action: Any
    expert_action: Any
    cost: float


@dataclass
class Trajectory:
    steps: list[Step]
    metrics: dict[str, float] = field(default_factory=dict)
    source_iteration: int = 0
    source_seed: int = 0

    def __len__(self):
        return len(self.steps)


def rollout(env: Environment, policy: Policy, horizon: int,
            rng: int | np.random.Generator, *, expert: Policy | None = None,
            iteration: int = 0) -> Trajectory:
    """Run ``policy`` for at most ``horizon`` steps, querying the expert at
    every visited state (whoever acted)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    seed = rng if isinstance(rng, (int, np.integer)) else int(as_rng(rng).integers(2**63))
    env_rng, pol_rng = (np.random.default_rng(s)
                        for s in np.random.SeedSequence(int(seed) & (2**64 - 1)).spawn(2))
    expert = expert if expert is not None else env.expert()
    state = env.reset(env_rng)
    steps = []
    total = 0.0
    for t in range(1, horizon + 1):
        a = policy.act(state, pol_rng)
        try:
            a = env.action_spec.validate(a)
        except SchemaError as exc:
            raise InvalidActionError(str(exc), t) from exc
        e = expert.act(state, None)
        nxt, cost, done = env.step(a)
        steps.append(Step(state, a, e, float(cost)))
        total += cost
        state = nxt
        if done:
            break
    metrics = {"cost": total, "steps": float(len(steps))}
    metrics.update(env.episode_metrics())
    return Trajectory(steps, metrics, iteration, int(seed))


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: Any
    iteration: int
    t: int


def label_with_expert(traj: Trajectory, expert: Policy) -> list[Example]:
    """One example per visited state, labeled with the expert's action there."""
    out = []
    for step in traj.steps:
        if step.state.features is None:
            raise SchemaError("dataset examples need feature vectors")
        out.append(Example(step.state.features, expert.act(step.state, None),
                           traj.source_iteration, step.state.t))
    return out


# --------------------------------------------------------------------------
# Datasets

class AggregateDataset:
    """Ordered union of expert-labeled examples.

    Examples stay in insertion order (iteration-major, then trajectory, then
    time). Optional per-example ``weights`` are used by the exact
    (distribution-weighted) tabular variant; sampled data is unweighted.
    """

    def __init__(self, feature_dim: int, action_spec: ActionSpec):
        self.feature_dim = int(feature_dim)
        self.action_spec = action_spec
        self._chunks: list[tuple] = []
        self._cache = None

    def __len__(self):
        return sum(len(c[0]) for c in self._chunks)

    def add(self, examples: Iterable[Example], weights: Sequence[float] | None = None):
        examples = list(examples)
        if not examples:
            return self
        X = np.array([e.features for e in examples], dtype=float).reshape(len(examples), -1)
        if X.shape[1] != self.feature_dim:
            raise SchemaError(f"feature dim {X.shape[1]} != dataset dim {self.feature_dim}")
        y = self._labels([self.action_spec.validate(e.label) for e in examples])
        it = np.array([e.iteration for e in examples], dtype=np.int64)
        ts = np.array([e.t for e in examples], dtype=np.int64)
        w = None if weights is None else np.asarray(weights, dtype=float)
        self._chunks.append((X, y, it, ts, w))
        self._cache = None
        return self

    def add_arrays(self, X, y, iteration, t, weights=None):
        X = np.asarray(X, dtype=float)
        n = len(X)
        if n == 0:
            return self
        if X.shape[1] != self.feature_dim:
            raise SchemaError(f"feature dim {X.shape[1]} != dataset dim {self.feature_dim}")
        it = np.broadcast_to(np.asarray(iteration, dtype=np.int64), (n,)).copy()
        ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,)).copy()
        w = None if weights is None else np.asarray(weights, dtype=float)
        self._chunks.append((X, self._labels(y), it, ts, w))
        self._cache = None
        return self

    def _labels(self, y):
        if self.action_spec.discrete:
            return np.asarray(y, dtype=np.int64).reshape(-1)
        return np.asarray(y, dtype=float).reshape(-1, self.action_spec.size)

    def extend(self, other: "AggregateDataset"):
        if other.feature_dim != self.feature_dim or other.action_spec != self.action_spec:
            raise SchemaError("cannot merge datasets with different schemas")
        self._chunks.extend(other._chunks)
        self._cache = None
        return self

    def copy(self) -> "AggregateDataset":
        d = AggregateDataset(self.feature_dim, self.action_spec)
        d._chunks = list(self._chunks)
        return d

    @classmethod
    def concat(cls, datasets: Sequence["AggregateDataset"]) -> "AggregateDataset":
        out = cls(datasets[0].feature_dim, datasets[0].action_spec)
        for d in datasets:
            out.extend(d)
        return out

    def _arrays(self):
        if self._cache is None:
            d = self.feature_dim
            if not self._chunks:
                ylab = (np.zeros(0, np.int64) if self.action_spec.discrete
                        else np.zeros((0, self.action_spec.size)))
                self._cache = (np.zeros((0, d)), ylab, np.zeros(0, np.int64),
                               np.zeros(0, np.int64), None)
            else:
                X = np.concatenate([c[0] for c in self._chunks])
                y = np.concatenate([c[1] for c in self._chunks])
                it = np.concatenate([c[2] for c in self._chunks])
                ts = np.concatenate([c[3] for c in self._chunks])
                if all(c[4] is None for c in self._chunks):
                    w = None
                else:
                    w = np.concatenate([c[4] if c[4] is not None else np.ones(len(c[0]))
                                        for c in self._chunks])
                self._cache = (X, y, it, ts, w)
        return self._cache

    @property
    def X(self) -> np.ndarray:
        return self._arrays()[0]

    @property
    def y(self) -> np.ndarray:
        return self._arrays()[1]

    @property
    def iterations(self) -> np.ndarray:
        return self._arrays()[2]

    @property
    def t(self) -> np.ndarray:
        return self._arrays()[3]

    @property
    def weights(self) -> np.ndarray | None:
        return self._arrays()[4]

    def with_weights(self, weights: np.ndarray) -> "AggregateDataset":
        X, y, it, ts, _ = self._arrays()
        out = AggregateDataset(self.feature_dim, self.action_spec)
        out.add_arrays(X, y, it, ts, weights)
        return out

    def __repr__(self):
        return (f"AggregateDataset(n={len(self)}, feature_dim={self.feature_dim}, "
                f"action={self.action_spec.header()})")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(dataset: AggregateDataset, path: str | Path) -> None:
    """Line format: header, then ``iter t f_1 ... f_d | label`` per example."""
    if dataset.weights is not None:
        raise SchemaError("weighted (exact) datasets have no file representation")
    X, y, it, ts, _ = dataset._arrays()
    lines = [f"ilb-dataset v1 feature_dim={dataset.feature_dim} "
             f"action={dataset.action_spec.header()}"]
    for k in range(len(X)):
        feats = " ".join(_fmt(v) for v in X[k])
        if dataset.action_spec.discrete:
            lab = str(int(y[k]))
        else:
            lab = " ".join(_fmt(v) for v in y[k])
        lines.append(f"{it[k]} {ts[k]} {feats} | {lab}".replace("  ", " "))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path: str | Path) -> AggregateDataset:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("ilb-dataset v1"):
        raise SchemaError(f"{path}: missing 'ilb-dataset v1' header")
    fields = dict(tok.split("=", 1) for tok in text[0].split()[2:])
    try:
        d = int(fields["feature_dim"])
        spec = ActionSpec.parse(fields["action"])
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"{path}: bad header {text[0]!r}") from exc
    X, y, it, ts = [], [], [], []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        left, sep, right = line.partition("|")
        toks = left.split()
        if not sep or len(toks) != d + 2:
            raise SchemaError(f"{path}:{lineno}: malformed example line")
        it.append(int(toks[0]))
        ts.append(int(toks[1]))
        X.append([float(v) for v in toks[2:]])
        lab = right.split()
        if spec.discrete:
            y.append(int(lab[0]))
        else:
            y.append([float(v) for v in lab])
    ds = AggregateDataset(d, spec)
    if X:
        ds.add_arrays(np.array(X, dtype=float).reshape(-1, d), y, it, ts)
    return ds


def dataset_from_trajectories(trajs: Iterable[Trajectory], expert: Policy,
                              feature_dim: int, action_spec: ActionSpec) -> AggregateDataset:
    ds = AggregateDataset(feature_dim, action_spec)
    for tr in trajs:
        ds.add(label_with_expert(tr, expert))
    return ds


# --------------------------------------------------------------------------
# Surrogate losses

@dataclass(frozen=True)
class SurrogateLoss:
    """Per-state loss of a policy against the expert label, bounded in
    ``[0, ell_max]``.

    * ``zero_one`` -- disagreement; continuous actions disagree when any
      coordinate differs by more than ``tau`` (fraction of the action range).
    * ``squared`` -- continuous: squared error of the clipped action summed
      over dimensions; discrete: ``||clip(scores, 0, 1) - onehot(label)||^2``
      for score-based policies, else ``2 * zero_one``.
    * ``hinge`` -- mean hinge over binary outputs with margins clipped to
      ``[-1, 1]``; policies without margins score ``2 * zero_one``.
    """

    kind: str
    action_spec: ActionSpec
    tau: float = 0.1

    def __post_init__(self):
        if self.kind not in ("zero_one", "squared", "hinge"):
            raise ValueError(f"unknown loss {self.kind!r}")

    @property
    def ell_max(self) -> float:
        spec = self.action_spec
        if self.kind == "zero_one":
            return 1.0
        if self.kind == "hinge":
            return 2.0
        if spec.discrete:
            return float(spec.size)
        return spec.size * spec.span ** 2

    def batch(self, policy: Policy, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-example losses of ``policy`` on features ``X`` with labels ``y``."""
        if isinstance(policy, MixturePolicy):
            return sum(w * self.batch(p, X, y) for w, p in policy.components)
        spec = self.action_spec
        n = len(X)
        if n == 0:
            return np.zeros(0)
        raw = policy.raw(X)
        if spec.discrete:
            y = np.asarray(y, dtype=np.int64)
            acts = np.asarray(policy.act_batch(X), dtype=np.int64)
            wrong = (acts != y).astype(float)
            if self.kind == "zero_one":
                return wrong
            if self.kind == "squared":
                model = getattr(policy, "model", None)
                if raw is not None and getattr(model, "outputs", None) == "scores":
                    p = np.clip(raw, 0.0, 1.0)
                    onehot = np.zeros_like(p)
                    onehot[np.arange(n), y] = 1.0
                    return np.sum((p - onehot) ** 2, axis=1)
                return 2.0 * wrong
            margins = None if raw is None else policy.model.signed_margins(raw, y)
            if margins is None:
                return 2.0 * wrong
            return np.nanmean(np.maximum(0.0, 1.0 - np.clip(margins, -1.0, 1.0)), axis=1)
        y = np.asarray(y, dtype=float).reshape(n, spec.size)
        acts = np.asarray(policy.act_batch(X), dtype=float).reshape(n, spec.size)
        if self.kind == "zero_one":
            return np.any(np.abs(acts - y) > self.tau * spec.span, axis=1).astype(float)
        if self.kind == "squared":
            return np.sum((acts - y) ** 2, axis=1)
        raise SchemaError("hinge loss needs a discrete action space")

    def __call__(self, policy: Policy, state: StateObs, label) -> float:
        return float(self.batch(policy, state.features[None, :], np.asarray([label]))[0])


def empirical_loss(policy: Policy, dataset: AggregateDataset, loss: SurrogateLoss) -> float:
    """(Weighted) mean per-example loss of ``policy`` on ``dataset``."""
    if len(dataset) == 0:
        raise EmptyDatasetError("empirical loss of an empty dataset")
    vals = loss.batch(policy, dataset.X, dataset.y)
    w = dataset.weights
    if w is None:
        return float(np.mean(vals))
    return float(np.dot(w, vals) / np.sum(w))
