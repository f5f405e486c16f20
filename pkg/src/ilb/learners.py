"""Linear base learners, Follow-The-Leader training and regret accounting.

* ridge: closed-form minimizer of ``(1/n) sum (w.x + b - y)^2 + (lam/2)|w|^2``
  (bias unregularized). Discrete action spaces regress one-hot targets and
  act by argmax.
* svm: one hinge-loss linear separator per output bit, trained by SGD.
* allpairs: K(K-1)/2 hinge separators combined by pairwise vote.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .core import (ActionSpec, AggregateDataset, EmptyDatasetError, ILBError, LearnedPolicy,
                   Policy, SchemaError, SurrogateLoss, as_rng, empirical_loss)


class LearnerError(ILBError):
    pass


class SingularSystemError(LearnerError):
    pass


# --------------------------------------------------------------------------
# Models

@dataclass
class LinearRegressor:
    weights: np.ndarray  # (n_out, d)
    bias: np.ndarray  # (n_out,)
    ridge_lambda: float
    action_spec: ActionSpec
    kind = "ridge"

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def outputs(self) -> str:
        return "scores" if self.action_spec.discrete else "values"

    def raw(self, X):
        return np.asarray(X, dtype=float) @ self.weights.T + self.bias

    def decode(self, r):
        if self.action_spec.discrete:
            return int(np.argmax(r))
        return np.clip(r, self.action_spec.low, self.action_spec.high)

    def decode_batch(self, R):
        if self.action_spec.discrete:
            return np.argmax(R, axis=1)
        return np.clip(R, self.action_spec.low, self.action_spec.high)

    def signed_margins(self, R, y):
        return None


def n_bits_for(K: int) -> int:
    b = int(K).bit_length() - 1
    if K < 2 or (1 << b) != K:
        raise SchemaError(f"bit-wise SVM needs a power-of-two label count, got {K}")
    return b


@dataclass
class LinearClassifier:
    """Binary linear separators: ``indicator(w.x + b > 0)`` per output.

    ``mode="bits"``: separator k predicts bit k of the label.
    ``mode="allpairs"``: separator for pair (i, j), i < j, votes i when its
    margin is >= 0, else j; argmax of votes with ties to the lowest class.
    """

    weights: np.ndarray  # (n_out, d)
    bias: np.ndarray
    reg_lambda: float
    action_spec: ActionSpec
    mode: str = "bits"
    kind: str = field(init=False)

    def __post_init__(self):
        self.kind = "svm" if self.mode == "bits" else "allpairs"

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def pairs(self) -> list[tuple[int, int]]:
        K = self.action_spec.size
        return [(i, j) for i in range(K) for j in range(i + 1, K)]

    def raw(self, X):
        return np.asarray(X, dtype=float) @ self.weights.T + self.bias

    def decode(self, r):
        return int(self.decode_batch(np.asarray(r)[None, :])[0])

    def decode_batch(self, R):
        if self.mode == "bits":
            bits = (R > 0).astype(np.int64)
            return bits @ (1 << np.arange(R.shape[1], dtype=np.int64))
        K = self.action_spec.size
        pi, pj = np.array(self.pairs).T
        votes = np.zeros((R.shape[0], K), dtype=np.int64)
        win = np.where(R >= 0, pi[None, :], pj[None, :])
        for k in range(K):
            votes[:, k] = np.sum(win == k, axis=1)
        return np.argmax(votes, axis=1)

    def signed_margins(self, R, y):
        """Margins signed toward the true label (positive = correct side)."""
        y = np.asarray(y, dtype=np.int64)
        if self.mode == "bits":
            signs = 2.0 * ((y[:, None] >> np.arange(R.shape[1])) & 1) - 1.0
            return R * signs
        pi, pj = np.array(self.pairs).T
        involved = (pi[None, :] == y[:, None]) | (pj[None, :] == y[:, None])
        signs = np.where(pi[None, :] == y[:, None], 1.0, -1.0)
        m = R * signs
        # only separators that involve the true label carry a margin
        return np.where(involved, m, np.nan)


# --------------------------------------------------------------------------
# Ridge regression

def _targets(dataset: AggregateDataset) -> np.ndarray:
    spec = dataset.action_spec
    if spec.discrete:
        Y = np.zeros((len(dataset), spec.size))
        Y[np.arange(len(dataset)), dataset.y] = 1.0
        return Y
    return np.asarray(dataset.y, dtype=float).reshape(len(dataset), spec.size)


def ridge_solve(X: np.ndarray, Y: np.ndarray, lam: float, w: np.ndarray | None = None):
    """Normal-equation solution with an unregularized intercept.

    Minimizes ``sum_k w_k (W x_k + b - y_k)^2 / sum w + (lam/2)|W|^2``.
    Returns ``(W (n_out, d), b (n_out,))``.
    """
    n, d = X.shape
    omega = np.full(n, 1.0 / n) if w is None else np.asarray(w, dtype=float) / np.sum(w)
    xbar = omega @ X
    ybar = omega @ Y
    Xc = X - xbar
    Yc = Y - ybar
    A = (Xc * omega[:, None]).T @ Xc + 0.5 * lam * np.eye(d)
    rhs = (Xc * omega[:, None]).T @ Yc
    try:
        if np.linalg.cond(A) > 1e14:
            raise np.linalg.LinAlgError("ill-conditioned")
        W = np.linalg.solve(A, rhs).T
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            "ridge normal equations are singular; use lam > 0") from exc
    b = ybar - W @ xbar
    return W, b


def ridge_fit(dataset: AggregateDataset, lam: float = 1e-3) -> LinearRegressor:
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot fit ridge on an empty dataset")
    W, b = ridge_solve(dataset.X, _targets(dataset), lam, dataset.weights)
    return LinearRegressor(W, b, lam, dataset.action_spec)


def ridge_objective(model: LinearRegressor, dataset: AggregateDataset) -> float:
    R = model.raw(dataset.X) - _targets(dataset)
    per = np.sum(R ** 2, axis=1)
    w = dataset.weights
    mean = per.mean() if w is None else np.dot(w, per) / w.sum()
    return float(mean + 0.5 * model.ridge_lambda * np.sum(model.weights ** 2))


# --------------------------------------------------------------------------
# Hinge-loss SGD

@numba.njit(cache=True)
def _sgd_hinge(X, y, sw, lam, order, t0):
    # Per-example step: w <- (1 - eta*lam) w + eta*sw*y*x on a margin violation,
    # eta = 1 / (lam * (t + t0)); bias takes the same step, unregularized.
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    t = 0
    for e in range(order.shape[0]):
        for k in range(n):
            i = order[e, k]
            t += 1
            eta = 1.0 / (lam * (t + t0))
            m = b
            for j in range(d):
                m += w[j] * X[i, j]
            shrink = 1.0 - eta * lam
            for j in range(d):
                w[j] *= shrink
            if y[i] * m < 1.0:
                g = eta * sw[i] * y[i]
                for j in range(d):
                    w[j] += g * X[i, j]
                b += g
    return w, b


def hinge_objective(w, b, X, y, lam, sw=None) -> float:
    h = np.maximum(0.0, 1.0 - y * (X @ w + b))
    mean = h.mean() if sw is None else np.dot(sw, h) / np.sum(sw)
    return float(mean + 0.5 * lam * np.dot(w, w))


def _orders(rng: np.random.Generator, n: int, epochs: int) -> np.ndarray:
    return np.stack([rng.permutation(n) for _ in range(epochs)]).astype(np.int64)


def _sample_weights(dataset: AggregateDataset) -> np.ndarray:
    w = dataset.weights
    if w is None:
        return np.ones(len(dataset))
    return w * (len(w) / np.sum(w))


def binary_sgd(X, y, lam, epochs, rng, eta0=None, sw=None):
    """Train one hinge separator; returns ``(w, b)``.

    Step size ``1/(lam*(t + t0))`` with ``t0 = 1/(lam*eta0)`` (``t0 = 0`` when
    ``eta0`` is None, i.e. the plain ``1/(lam*t)`` schedule).
    """
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    n = len(X)
    if n == 0:
        return np.zeros(X.shape[1]), 0.0
    sw = np.ones(n) if sw is None else np.ascontiguousarray(sw, dtype=float)
    t0 = 0.0 if eta0 is None else 1.0 / (lam * eta0)
    order = _orders(as_rng(rng), n, epochs)
    return _sgd_hinge(X, y, sw, float(lam), order, float(t0))


def svm_sgd_fit(dataset: AggregateDataset, lam: float = 1e-4, epochs: int = 5,
                rng=None, eta0: float | None = 0.1) -> LinearClassifier:
    """Per-bit hinge separators. A 2-label space has one separator (bit 0)."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    spec = dataset.action_spec
    if not spec.discrete:
        raise SchemaError("svm learner needs discrete labels")
    nb = n_bits_for(spec.size)
    rng = as_rng(rng)
    X = dataset.X
    sw = _sample_weights(dataset)
    W = np.zeros((nb, dataset.feature_dim))
    b = np.zeros(nb)
    # one shared shuffle stream so bits are trained on the same example order
    seed = int(rng.integers(2**63))
    for k in range(nb):
        yk = 2.0 * ((dataset.y >> k) & 1) - 1.0
        W[k], b[k] = binary_sgd(X, yk, lam, epochs, np.random.default_rng(seed), eta0, sw)
    return LinearClassifier(W, b, lam, spec, mode="bits")


def allpairs_fit(dataset: AggregateDataset, K: int, lam: float = 1e-4, epochs: int = 5,
                 rng=None, eta0: float | None = 0.1) -> LinearClassifier:
    if K < 2:
        raise LearnerError("all-pairs reduction needs K >= 2")
    spec = dataset.action_spec
    if not spec.discrete or spec.size != K:
        raise SchemaError(f"dataset labels are {spec.header()}, expected discrete:{K}")
    rng = as_rng(rng)
    X, y = dataset.X, dataset.y
    sw = _sample_weights(dataset)
    pairs = [(i, j) for i in range(K) for j in range(i + 1, K)]
    W = np.zeros((len(pairs), dataset.feature_dim))
    b = np.zeros(len(pairs))
    seeds = rng.integers(2**63, size=len(pairs))
    for p, (i, j) in enumerate(pairs):
        mask = (y == i) | (y == j)
        yp = np.where(y[mask] == i, 1.0, -1.0)
        W[p], b[p] = binary_sgd(X[mask], yp, lam, epochs, np.random.default_rng(seeds[p]),
                                eta0, sw[mask])
    return LinearClassifier(W, b, lam, spec, mode="allpairs")


def allpairs_predict(clf: LinearClassifier, x) -> int:
    return clf.decode(clf.raw(np.asarray(x, dtype=float)[None, :])[0])


# --------------------------------------------------------------------------
# Learner configuration and FTL

@dataclass(frozen=True)
class LearnerConfig:
    kind: str = "ridge"  # ridge | svm | allpairs
    lam: float = 1e-3
    epochs: int = 5
    eta0: float | None = 0.1

    def __post_init__(self):
        if self.kind not in ("ridge", "svm", "allpairs"):
            raise LearnerError(f"unknown learner kind {self.kind!r}")

    def fit(self, dataset: AggregateDataset, rng=None):
        if self.kind == "ridge":
            return ridge_fit(dataset, self.lam)
        if self.kind == "svm":
            return svm_sgd_fit(dataset, self.lam, self.epochs, rng, self.eta0)
        return allpairs_fit(dataset, dataset.action_spec.size, self.lam, self.epochs, rng,
                            self.eta0)

    def zero_model(self, feature_dim: int, spec: ActionSpec):
        """All-zero parameters; a valid arbitrary initial policy."""
        if self.kind == "ridge":
            n_out = spec.size
            return LinearRegressor(np.zeros((n_out, feature_dim)), np.zeros(n_out), self.lam, spec)
        if self.kind == "svm":
            nb = n_bits_for(spec.size)
            return LinearClassifier(np.zeros((nb, feature_dim)), np.zeros(nb), self.lam, spec)
        n = spec.size * (spec.size - 1) // 2
        return LinearClassifier(np.zeros((n, feature_dim)), np.zeros(n), self.lam, spec,
                                mode="allpairs")


def ftl_train(datasets, config: LearnerConfig, rng=None) -> LearnedPolicy:
    """Follow-The-Leader: fit the base learner on the concatenation of all
    datasets so far, uniform weight per example."""
    datasets = list(datasets)
    if not datasets:
        raise EmptyDatasetError("FTL needs at least one dataset")
    agg = AggregateDataset.concat(datasets)
    return LearnedPolicy(config.fit(agg, rng), agg.feature_dim)


@dataclass
class RegretLedger:
    chosen_losses: np.ndarray
    best_in_hindsight_loss: float
    avg_regret: float
    hindsight_policy: Policy
    datasets: list = field(repr=False, default_factory=list)
    policies: list = field(repr=False, default_factory=list)
    loss: SurrogateLoss | None = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return len(self.chosen_losses)

    def loss_matrix(self) -> np.ndarray:
        """``L[i, j]``: loss of policy j on dataset i (computed on demand)."""
        return np.array([[empirical_loss(p, d, self.loss) for p in self.policies]
                         for d in self.datasets])


def hindsight_weights(datasets) -> np.ndarray:
    """Per-example weights giving every dataset equal total mass 1/N."""
    parts = []
    N = len(datasets)
    for d in datasets:
        w = np.ones(len(d)) if d.weights is None else d.weights
        parts.append(w / (np.sum(w) * N))
    return np.concatenate(parts)


def regret_report(datasets, policy_sequence, loss: SurrogateLoss, config: LearnerConfig,
                  rng=None) -> RegretLedger:
    """Average regret of ``policy_sequence`` (policy i played on dataset i)
    against the base learner refit on all datasets in hindsight."""
    datasets = list(datasets)
    policy_sequence = list(policy_sequence)
    if len(datasets) != len(policy_sequence) or not datasets:
        raise ValueError("need one policy per dataset, N >= 1")
    chosen = np.array([empirical_loss(p, d, loss) for p, d in zip(policy_sequence, datasets)])
    agg = AggregateDataset.concat(datasets).with_weights(hindsight_weights(datasets))
    best = LearnedPolicy(config.fit(agg, rng), agg.feature_dim)
    eps_hat = float(np.mean([empirical_loss(best, d, loss) for d in datasets]))
    return RegretLedger(chosen, eps_hat, float(chosen.mean() - eps_hat), best,
                        datasets, policy_sequence, loss)


# --------------------------------------------------------------------------
# Model files

def write_model(model, path: str | Path) -> None:
    spec = model.action_spec
    lam = model.ridge_lambda if isinstance(model, LinearRegressor) else model.reg_lambda
    n_out, d = model.weights.shape
    head = (f"ilb-model v1 kind={model.kind} dim={d} out={n_out} "
            f"action={spec.header()} low={spec.low!r} high={spec.high!r} lambda={lam!r}")
    rows = [" ".join(repr(float(v)) for v in np.append(model.weights[k], model.bias[k]))
            for k in range(n_out)]
    Path(path).write_text(head + "\n" + "\n".join(rows) + "\n")


def read_model(path: str | Path):
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("ilb-model v1"):
        raise LearnerError(f"{path}: missing 'ilb-model v1' header")
    hdr = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    d, n_out = int(hdr["dim"]), int(hdr["out"])
    kind, _, size = hdr["action"].partition(":")
    spec = ActionSpec(kind, int(size), float(hdr["low"]), float(hdr["high"]))
    vals = np.array([float(v) for ln in lines[1:] for v in ln.split()]).reshape(n_out, d + 1)
    W, b = vals[:, :d].copy(), vals[:, d].copy()
    lam = float(hdr["lambda"])
    if hdr["kind"] == "ridge":
        return LinearRegressor(W, b, lam, spec)
    return LinearClassifier(W, b, lam, spec, mode="bits" if hdr["kind"] == "svm" else "allpairs")
