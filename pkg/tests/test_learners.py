import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ilb.core import ActionSpec, AggregateDataset, Example, LearnedPolicy, SurrogateLoss
from ilb.harness.bounds import dagger_regret_instances
from ilb.learners import (LearnerConfig, LearnerError, LinearClassifier, LinearRegressor,
                          allpairs_fit, allpairs_predict, binary_sgd, ftl_train,
                          hinge_objective, read_model, regret_report, ridge_fit,
                          ridge_objective, svm_sgd_fit, write_model)
from ilb.meta import BetaSchedule, dagger_exact

CONT = ActionSpec("continuous", 1, -1e9, 1e9)


def dataset(X, y, spec, iteration=1):
    ds = AggregateDataset(X.shape[1], spec)
    ds.add([Example(np.asarray(x, float), yy, iteration, k + 1)
            for k, (x, yy) in enumerate(zip(X, y))])
    return ds


def cont_ds(X, y):
    return dataset(np.asarray(X, float), [np.array([v]) for v in y], CONT)


# -- ridge --------------------------------------------------------------------

def test_ridge_interpolates_two_points():
    m = ridge_fit(cont_ds([[1.0], [2.0]], [1.0, 2.0]), lam=0.0)
    assert m.weights[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert m.bias[0] == pytest.approx(0.0, abs=1e-12)


def test_ridge_constant_labels():
    rng = np.random.default_rng(0)
    m = ridge_fit(cont_ds(rng.normal(size=(20, 3)), [0.7] * 20), lam=0.1)
    assert np.allclose(m.weights, 0.0, atol=1e-12)
    assert m.bias[0] == pytest.approx(0.7, abs=1e-12)


def ridge_grad(m, X, y, lam):
    r = X @ m.weights[0] + m.bias[0] - y
    n = len(y)
    return np.append(2 * X.T @ r / n + lam * m.weights[0], 2 * r.sum() / n)


def test_ridge_first_order_optimality_and_finite_differences():
    rng = np.random.default_rng(42)
    X = rng.normal(size=(50, 5))
    y = X @ rng.normal(size=5) + 0.3 + 0.1 * rng.normal(size=50)
    lam = 1e-3
    ds = cont_ds(X, y)
    m = ridge_fit(ds, lam)
    g = ridge_grad(m, X, y, lam)
    assert np.linalg.norm(g) < 1e-8
    # finite differences of the objective against the analytic gradient at a perturbed point
    theta = np.append(m.weights[0], m.bias[0]) + rng.normal(size=6) * 0.1

    def obj(th):
        mm = LinearRegressor(th[None, :5], th[5:], lam, CONT)
        return ridge_objective(mm, ds)

    ana = ridge_grad(LinearRegressor(theta[None, :5], theta[5:], lam, CONT), X, y, lam)
    h = 1e-6
    fd = np.array([(obj(theta + h * e) - obj(theta - h * e)) / (2 * h) for e in np.eye(6)])
    assert np.allclose(fd, ana, rtol=1e-5, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), lam=st.floats(1e-4, 10.0))
def test_ridge_gradient_property(seed, lam):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(3, 40)), int(rng.integers(1, 6))
    X = rng.normal(size=(n, d))
    y = rng.normal(size=n)
    m = ridge_fit(cont_ds(X, y), lam)
    assert np.linalg.norm(ridge_grad(m, X, y, lam)) < 1e-8


def test_ftl_examples():
    rng = np.random.default_rng(3)
    d1 = cont_ds(rng.normal(size=(15, 2)), rng.normal(size=15))
    d2 = cont_ds(rng.normal(size=(15, 2)), rng.normal(size=15))
    cfg = LearnerConfig("ridge", 1e-3)
    single = ftl_train([d1], cfg).model
    assert np.allclose(single.weights, ridge_fit(d1, 1e-3).weights, atol=1e-12)
    dup = ftl_train([d1, d1], cfg).model
    assert np.allclose(dup.weights, single.weights, atol=1e-10)
    assert np.allclose(dup.bias, single.bias, atol=1e-10)
    both = ftl_train([d1, d2], cfg).model
    union = ridge_fit(AggregateDataset.concat([d1, d2]), 1e-3)
    assert np.allclose(both.weights, union.weights, atol=1e-12)


# -- hinge SGD ----------------------------------------------------------------

def batch_subgradient(X, y, lam, iters=20000):
    """Batch subgradient descent on the regularized hinge objective, best iterate kept."""
    n, d = X.shape
    w, b = np.zeros(d), 0.0
    best = (hinge_objective(w, b, X, y, lam), w.copy(), b)
    for t in range(1, iters + 1):
        viol = y * (X @ w + b) < 1
        gw = lam * w - (y[viol, None] * X[viol]).sum(axis=0) / n
        gb = -y[viol].sum() / n
        eta = 1.0 / (lam * t + 10.0)
        w, b = w - eta * gw, b - eta * gb
        f = hinge_objective(w, b, X, y, lam)
        if f < best[0]:
            best = (f, w.copy(), b)
    return best


def test_svm_separates_two_points():
    X = np.array([[1.0, 0.0], [-1.0, 0.0]])
    w, b = binary_sgd(X, np.array([1.0, -1.0]), 1e-2, 100, np.random.default_rng(0))
    assert np.all(np.sign(X @ w + b) == [1, -1])


def test_svm_single_class():
    spec = ActionSpec("discrete", 2)
    ds = dataset(np.random.default_rng(0).normal(size=(10, 3)), [1] * 10, spec)
    clf = svm_sgd_fit(ds, 1e-3, 5, np.random.default_rng(0))
    assert np.all(LearnedPolicy(clf).act_batch(ds.X) == 1)


def test_svm_objective_near_batch_oracle():
    rng = np.random.default_rng(7)
    X = np.vstack([rng.normal(1.0, 1.0, size=(60, 2)), rng.normal(-1.0, 1.0, size=(60, 2))])
    y = np.r_[np.ones(60), -np.ones(60)]
    lam = 1e-2
    w, b = binary_sgd(X, y, lam, 50, np.random.default_rng(1))
    f_sgd = hinge_objective(w, b, X, y, lam)
    f_oracle = batch_subgradient(X, y, lam)[0]
    assert f_sgd <= 1.05 * f_oracle


def test_svm_reproducible_bitwise():
    rng = np.random.default_rng(0)
    spec = ActionSpec("discrete", 4)
    ds = dataset(rng.normal(size=(40, 3)), rng.integers(4, size=40), spec)
    a = svm_sgd_fit(ds, 1e-4, 3, np.random.default_rng(5))
    b = svm_sgd_fit(ds, 1e-4, 3, np.random.default_rng(5))
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)
    with pytest.raises(ValueError):
        svm_sgd_fit(ds, 1e-4, 0)


# -- all-pairs ----------------------------------------------------------------

def test_allpairs_k2_matches_binary():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 2))
    y = (X[:, 0] > 0).astype(int)
    spec = ActionSpec("discrete", 2)
    clf = allpairs_fit(dataset(X, y, spec), 2, 1e-3, 10, np.random.default_rng(1))
    assert clf.weights.shape[0] == 1
    # pair (0, 1) votes 0 on a non-negative margin
    expect = np.where(clf.raw(X)[:, 0] >= 0, 0, 1)
    assert np.array_equal(clf.decode_batch(clf.raw(X)), expect)


def test_allpairs_gaussian_clusters():
    rng = np.random.default_rng(2)
    centers = np.array([[5.0, 0.0], [-5.0, 0.0], [0.0, 5.0]])
    X = np.vstack([c + rng.normal(size=(50, 2)) for c in centers])
    y = np.repeat(np.arange(3), 50)
    clf = allpairs_fit(dataset(X, y, ActionSpec("discrete", 3)), 3, 1e-3, 10,
                       np.random.default_rng(0))
    assert clf.weights.shape[0] == 3
    assert np.mean(clf.decode_batch(clf.raw(X)) == y) >= 0.99


def test_allpairs_ties_and_errors():
    spec = ActionSpec("discrete", 4)
    clf = LinearClassifier(np.zeros((6, 2)), np.zeros(6), 1e-4, spec, mode="allpairs")
    # zero margins vote the lower class of each pair: class 0 wins
    assert allpairs_predict(clf, np.zeros(2)) == 0
    votes_tied = LinearClassifier(np.zeros((3, 1)), np.array([1.0, -1.0, 1.0]), 1e-4,
                                  ActionSpec("discrete", 3), mode="allpairs")
    # pairs (0,1)->0, (0,2)->2, (1,2)->1: one vote each, lowest index wins
    assert allpairs_predict(votes_tied, np.zeros(1)) == 0
    with pytest.raises(LearnerError):
        allpairs_fit(dataset(np.zeros((2, 1)), [0, 0], ActionSpec("discrete", 1)), 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), K=st.integers(2, 6))
def test_allpairs_relabeling_invariance(seed, K):
    rng = np.random.default_rng(seed)
    spec = ActionSpec("discrete", K)
    pairs = [(i, j) for i in range(K) for j in range(i + 1, K)]
    W, b = rng.normal(size=(len(pairs), 3)), rng.normal(size=len(pairs))
    clf = LinearClassifier(W, b, 1e-4, spec, mode="allpairs")
    sigma = rng.permutation(K)
    W2, b2 = np.zeros_like(W), np.zeros_like(b)
    for p, (i, j) in enumerate(pairs):
        a, c = sigma[i], sigma[j]
        q = pairs.index((min(a, c), max(a, c)))
        sign = 1.0 if a < c else -1.0
        W2[q], b2[q] = sign * W[p], sign * b[p]
    clf2 = LinearClassifier(W2, b2, 1e-4, spec, mode="allpairs")
    X = rng.normal(size=(200, 3))
    R = clf.raw(X)
    win = np.where(R >= 0, np.array(pairs)[:, 0], np.array(pairs)[:, 1])
    votes = np.stack([(win == k).sum(axis=1) for k in range(K)], axis=1)
    unique = (votes == votes.max(axis=1, keepdims=True)).sum(axis=1) == 1
    pa = clf.decode_batch(R)
    pb = clf2.decode_batch(clf2.raw(X))
    assert np.array_equal(sigma[pa[unique]], pb[unique])


# -- regret -------------------------------------------------------------------

def test_regret_base_cases():
    rng = np.random.default_rng(4)
    d = cont_ds(rng.normal(size=(20, 2)), rng.normal(size=20))
    cfg = LearnerConfig("ridge", 1e-3)
    loss = SurrogateLoss("squared", CONT)
    pol = ftl_train([d], cfg)
    led = regret_report([d], [pol], loss, cfg)
    assert led.avg_regret == pytest.approx(0.0, abs=1e-12)
    led = regret_report([d, d, d], [pol, pol, pol], loss, cfg)
    assert led.avg_regret == pytest.approx(0.0, abs=1e-12)
    assert led.loss_matrix().shape == (3, 3)


def test_regret_positive_and_decreasing_on_dagger():
    for name, mdp, expert, phi in dagger_regret_instances():
        loss = SurrogateLoss("squared", ActionSpec("discrete", mdp.n_actions))
        gam = []
        for N in (4, 8, 16, 32):
            run = dagger_exact(mdp, expert, LearnerConfig("ridge", 1e-6), N,
                               BetaSchedule("indicator"), loss, phi)
            gam.append(run.regret.avg_regret)
        assert all(g > 0 for g in gam), name
        assert all(b < a for a, b in zip(gam, gam[1:])), name


# -- model files --------------------------------------------------------------

@pytest.mark.parametrize("kind", ["ridge", "svm", "allpairs"])
def test_model_round_trip(tmp_path, kind):
    rng = np.random.default_rng(0)
    spec = ActionSpec("discrete", 4)
    ds = dataset(rng.normal(size=(30, 3)), rng.integers(4, size=30), spec)
    m = LearnerConfig(kind, 1e-3, epochs=2).fit(ds, np.random.default_rng(0))
    write_model(m, tmp_path / "m")
    back = read_model(tmp_path / "m")
    assert back.kind == m.kind
    assert np.array_equal(back.weights, m.weights) and np.array_equal(back.bias, m.bias)
    assert np.array_equal(back.raw(ds.X), m.raw(ds.X))


def test_learner_config_rejects_unknown():
    with pytest.raises(LearnerError):
        LearnerConfig("tree")
