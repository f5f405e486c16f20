import math

import numpy as np
import pytest

from ilb import core, tabular
from ilb.core import LearnedPolicy, Policy, StateObs
from ilb.envs import (PlatformerConfig, PlatformerEnv, RacerConfig, RacerEnv, Track,
                      UnknownEnvError, generate_stage, make_env, planner_expert,
                      pure_pursuit_expert, synth_glyphs)
from ilb.envs.platformer import JUMP, RIGHT, SPEED, StageError, read_stage, write_stage
from ilb.envs.racer import TrackError, read_track, write_track
from ilb.envs.seqlabel import (N_PIXELS, BrokenChainError, OcrFormatError, SeqLabelEnv,
                               load_ocr, teacher_forced_dataset, write_ocr)
from ilb.learners import LearnerConfig


def oval(straight=60.0, radius=10.0, n_arc=40, width=2.0):
    """Stadium track: two long straights joined by half circles (counter-clockwise)."""
    pts = [(x, -radius) for x in np.linspace(0, straight, 30, endpoint=False)]
    th = np.linspace(-np.pi / 2, np.pi / 2, n_arc, endpoint=False)
    pts += [(straight + radius * math.cos(a), radius * math.sin(a)) for a in th]
    pts += [(x, radius) for x in np.linspace(straight, 0, 30, endpoint=False)]
    pts += [(radius * math.cos(a + np.pi), radius * math.sin(a + np.pi)) for a in th]
    return Track(np.array(pts), width)


class Constant(Policy):
    kind = "learned"

    def __init__(self, action, spec):
        self.action, self.action_spec = action, spec

    def act(self, state, rng):
        return self.action


class UniformRandom(Policy):
    kind = "learned"

    def __init__(self, K, seed):
        self.K, self.rng = K, np.random.default_rng(seed)

    def act(self, state, rng):
        return int(self.rng.integers(self.K))


# -- racer ----------------------------------------------------------------------

def test_racer_expert_never_falls_over_five_laps():
    env = RacerEnv()
    env5 = RacerEnv(env.track, RacerConfig(horizon=5 * env.horizon))
    for seed in range(3):
        traj = core.rollout(env5, env5.expert(), env5.horizon, seed)
        assert traj.metrics["falls"] == 0
        assert traj.metrics["laps"] >= 4.99
        assert traj.metrics["falls_per_lap"] == 0


def test_racer_steer_sign_and_symmetry():
    env = RacerEnv(oval(), RacerConfig(steer_noise=0.0))
    pos = np.array([20.0, -10.0])  # middle of the bottom straight, heading +x

    def steer(offset, heading=0.0):
        p = pos + np.array([0.0, offset])
        st = StateObs(np.zeros(1), internal=(p, heading, env.track.project(p)[0]))
        return float(pure_pursuit_expert(env, st)[0])

    assert steer(0.0) == pytest.approx(0.0, abs=1e-12)
    assert steer(0.5) > 0  # left of center: turn right
    assert steer(-0.5) < 0
    for d in (0.1, 0.3, 0.7):
        assert steer(d) == pytest.approx(-steer(-d), abs=1e-12)


def test_racer_raster_matches_road_lookup():
    env = RacerEnv()
    st = env.reset(np.random.default_rng(3))
    pos, h, _ = st.internal
    g = env._grid
    world = pos + g[:, :1] * np.array([math.cos(h), math.sin(h)]) \
        + g[:, 1:] * np.array([-math.sin(h), math.cos(h)])
    assert np.array_equal(env.features(pos, h), env.road(world).astype(float))
    assert st.features.shape == (env.feature_dim,)
    assert env.features(pos, h).sum() > 0  # the road ahead is visible


def test_racer_fall_counter_and_reposition():
    env = RacerEnv(config=RacerConfig(horizon=300))
    traj = core.rollout(env, Constant(np.array([1.0]), env.action_spec), 300, 0)
    costs = [s.cost for s in traj.steps]
    assert traj.metrics["falls"] == sum(costs) > 0
    # after a fall the kart sits on the centerline
    env.reset(np.random.default_rng(0))
    for _ in range(300):
        _, cost, _ = env.step(np.array([1.0]))
        if cost:
            assert abs(env.offset()) < 1e-9
            break


def test_track_file_round_trip(tmp_path):
    tr = oval()
    write_track(tr, tmp_path / "t.txt")
    back = read_track(tmp_path / "t.txt")
    assert np.array_equal(back.points, tr.points) and back.width == tr.width
    (tmp_path / "bad.txt").write_text("track\n0 0\n")
    with pytest.raises(TrackError):
        read_track(tmp_path / "bad.txt")
    with pytest.raises(TrackError):
        Track(np.zeros((2, 2)), 1.0)


# -- platformer -----------------------------------------------------------------

def flat_env(length=60):
    env = PlatformerEnv(PlatformerConfig(stage_seed=0, length=length))
    env._fixed = env.stage = np.ones(length, dtype=np.int64)
    return env


def test_planner_flat_corridor_runs_right_fast():
    env = flat_env()
    st = env.reset(np.random.default_rng(0))
    for _ in range(10):
        assert planner_expert(env, st) == RIGHT | SPEED
        st, _, done = env.step(RIGHT | SPEED)
        assert not done
    traj = core.rollout(env, env.expert(), env.horizon, 0)
    assert traj.metrics["complete"] == 1.0
    assert len(traj.steps) == math.ceil((59 - 1.5) / env.phys.fast)


def test_planner_jumps_gaps_and_completes_stages():
    for seed in range(5):
        env = PlatformerEnv(PlatformerConfig(stage_seed=seed))
        traj = core.rollout(env, env.expert(), env.horizon, seed)
        assert traj.metrics["complete"] == 1.0, seed
        assert traj.metrics["dead"] == 0.0
        assert any(int(s.action) & JUMP for s in traj.steps)


def test_planner_fallback_when_doomed():
    env = flat_env()
    stage = np.array([1, 1] + [0] * 12 + [1] * 10, dtype=np.int64)
    st = StateObs(np.zeros(env.feature_dim), internal=(stage, 7.5, 0.2, -0.5, False))
    a = planner_expert(env, st)
    assert 0 <= a < 16


def test_stage_generation_deterministic():
    a, b = generate_stage(1, 11), generate_stage(1, 11)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, generate_stage(1, 12))
    assert set(np.unique(a)) <= {0, 1, 2, 3}
    with pytest.raises(StageError):
        generate_stage(0, 1)


def test_stage_file_round_trip(tmp_path):
    h = generate_stage(2, 4)
    write_stage(h, tmp_path / "s.txt")
    assert np.array_equal(read_stage(tmp_path / "s.txt"), h)
    (tmp_path / "bad.txt").write_text("ilb-stage v1\n1 1 7\n")
    with pytest.raises(StageError):
        read_stage(tmp_path / "bad.txt")


def test_platformer_distance_bounded_and_stuck():
    env = PlatformerEnv(PlatformerConfig(stage_seed=3))
    for k in range(5):
        traj = core.rollout(env, UniformRandom(16, k), env.horizon, k)
        assert 0 <= traj.metrics["distance"] <= len(env.stage) - 1
    # pressing right into a wall without jumping gets stuck
    stage = np.array([1] * 6 + [3] * 4 + [1] * 10, dtype=np.int64)
    env._fixed = env.stage = stage
    traj = core.rollout(env, Constant(RIGHT, env.action_spec), env.horizon, 0)
    assert traj.metrics["stuck"] == 1.0
    assert len(traj.steps) < env.horizon


# -- OCR loading and synthetic glyphs ----------------------------------------------

def record_line(rid, letter, nxt, wid, pos, fold=0, pixels=None):
    pix = [0] * N_PIXELS if pixels is None else pixels
    return "\t".join(map(str, [rid, letter, nxt, wid, pos, fold] + list(pix)))


def test_load_ocr_empty_and_two_line(tmp_path):
    (tmp_path / "e.txt").write_text("")
    words, folds = load_ocr(tmp_path / "e.txt")
    assert words == [] and len(folds) == 0
    pix = [1, 0] * 64
    (tmp_path / "w.txt").write_text(record_line(1, "h", 2, 1, 1, 3, pix) + "\n"
                                    + record_line(2, "i", -1, 1, 2, 3) + "\n")
    words, folds = load_ocr(tmp_path / "w.txt")
    assert len(words) == 1 and [r.letter for r in words[0]] == ["h", "i"]
    assert words[0][0].pixels.tolist() == pix and folds.tolist() == [3]


@pytest.mark.parametrize("bad,line", [
    (record_line(2, "A", -1, 1, 1), 2),
    (record_line(2, "a", -1, 1, 1, pixels=[2] * N_PIXELS), 2),
    ("2\ta\t-1", 2),
    (record_line(2, "a", -1, 1, 1).replace("\t-1\t", "\tx\t", 1), 2),
])
def test_load_ocr_reports_line_numbers(tmp_path, bad, line):
    (tmp_path / "b.txt").write_text(record_line(1, "a", -1, 1, 1) + "\n" + bad + "\n")
    with pytest.raises(OcrFormatError) as err:
        load_ocr(tmp_path / "b.txt")
    assert err.value.line == line and f"line {line}" in str(err.value)


def test_load_ocr_broken_chains(tmp_path):
    (tmp_path / "m.txt").write_text(record_line(1, "a", 9, 1, 1) + "\n")
    with pytest.raises(BrokenChainError) as err:
        load_ocr(tmp_path / "m.txt")
    assert err.value.line == 1
    (tmp_path / "c.txt").write_text(record_line(1, "a", 2, 1, 1) + "\n"
                                    + record_line(2, "b", 1, 1, 2) + "\n")
    with pytest.raises(BrokenChainError):
        load_ocr(tmp_path / "c.txt")
    (tmp_path / "d.txt").write_text(record_line(1, "a", -1, 1, 1) + "\n"
                                    + record_line(1, "b", -1, 2, 1) + "\n")
    with pytest.raises(OcrFormatError):
        load_ocr(tmp_path / "d.txt")


def test_synth_glyphs_deterministic_round_trip(tmp_path):
    a = synth_glyphs(50, noise=0.2, seed=4, successors=2)
    write_ocr(a, tmp_path / "a.txt")
    write_ocr(synth_glyphs(50, noise=0.2, seed=4, successors=2), tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    words, folds = load_ocr(tmp_path / "a.txt")
    assert [[r.letter for r in w] for w in words] == [[r.letter for r in w] for w in a]
    assert set(folds.tolist()) == set(range(10))
    assert (tmp_path / "a.txt").read_bytes() != _bytes(synth_glyphs(50, noise=0.2, seed=5),
                                                       tmp_path)


def _bytes(words, tmp_path):
    write_ocr(words, tmp_path / "x.txt")
    return (tmp_path / "x.txt").read_bytes()


def test_synth_successors_limit_bigrams():
    words = synth_glyphs(400, noise=0.0, seed=1, successors=2)
    follow = {}
    for w in words:
        for a, b in zip(w, w[1:]):
            follow.setdefault(a.letter, set()).add(b.letter)
    assert max(len(v) for v in follow.values()) <= 2


def _pixel_classifier_accuracy(noise, seed=0):
    env = SeqLabelEnv(synth_glyphs(400, noise=noise, seed=seed), use_previous=False)
    X, y = teacher_forced_dataset(env)
    ds = core.AggregateDataset(env.feature_dim, env.action_spec)
    ds.add_arrays(X, y, 1, np.ones(len(y), dtype=int))
    model = LearnerConfig("allpairs", 1e-3, epochs=10).fit(ds, np.random.default_rng(0))
    pol = LearnedPolicy(model, env.feature_dim)
    train = env.evaluate(pol, words=env.train_words)["accuracy"]
    test = env.evaluate(pol)["accuracy"]
    return train, test, y


def test_noiseless_glyphs_are_separable():
    train, test, _ = _pixel_classifier_accuracy(0.0)
    assert train == 1.0 and test == 1.0


def test_pure_noise_glyphs_are_chance():
    _, test, y = _pixel_classifier_accuracy(0.5)
    majority = np.bincount(y).max() / len(y)
    assert test <= majority + 0.05


def test_uniform_policy_accuracy_is_one_in_26():
    env = make_env("seqlabel", words=1500, noise=0.2, seed=2)
    acc = env.evaluate(UniformRandom(26, 0))
    n = acc["characters"]
    se = math.sqrt((1 / 26) * (25 / 26) / n)
    assert abs(acc["accuracy"] - 1 / 26) <= 4 * se


class Recorder(Policy):
    kind = "expert"

    def __init__(self):
        self.X = []

    def act(self, state, rng):
        self.X.append(state.features.copy())
        return state.internal


def test_seqlabel_expert_rollout_is_teacher_forcing():
    env = make_env("seqlabel", words=80, noise=0.2, seed=0)
    rec = Recorder()
    assert env.evaluate(rec, words=env.train_words)["accuracy"] == 1.0
    X, _ = teacher_forced_dataset(env)
    assert np.array_equal(np.array(rec.X), X)
    assert not X[0, N_PIXELS:].any()  # first position has no previous letter


def test_make_env_rejects_unknown():
    with pytest.raises(UnknownEnvError):
        make_env("tetris")
    with pytest.raises(UnknownEnvError):
        make_env("seqlabel", colour=1)
    with pytest.raises(UnknownEnvError):
        make_env("racer", colour=1)


# -- conformance ------------------------------------------------------------------

def conformance_envs():
    return [
        RacerEnv(config=RacerConfig(horizon=40)),
        PlatformerEnv(PlatformerConfig(stage_seed=1)),
        PlatformerEnv(),
        make_env("seqlabel", words=60),
        make_env("hazard", T=6),
        make_env("kaariainen", T=5, eps=0.2),
    ]


@pytest.mark.parametrize("env", conformance_envs(), ids=lambda e: e.name)
def test_environment_conformance(env):
    def trace(seed):
        rng = np.random.default_rng(seed)
        st = env.reset(rng)
        feats, costs = [st.features.copy()], []
        expert = env.expert()
        for _ in range(min(env.horizon, 25)):
            a = env.action_spec.validate(expert.act(st, None))
            st, c, done = env.step(a)
            costs.append(c)
            if done:
                break
            assert st.features.shape == (env.feature_dim,)
            assert np.all(np.isfinite(st.features))
            feats.append(st.features.copy())
        return feats, costs

    f1, c1 = trace(5)
    f2, c2 = trace(5)
    assert c1 == c2 and all(np.array_equal(a, b) for a, b in zip(f1, f2))
    assert len(f1) == len(f2)
    assert all(0 <= c <= 1 for c in c1)
    t1 = core.rollout(env, env.expert(), env.horizon, 9)
    t2 = core.rollout(env, env.expert(), env.horizon, 9)
    assert t1.metrics == t2.metrics
    assert [s.cost for s in t1.steps] == [s.cost for s in t2.steps]


def test_tabular_env_via_mdp_file(tmp_path):
    mdp, _, _ = tabular.build_kaariainen_chain(4, 0.1)
    tabular.write_mdp(mdp, tmp_path / "k.mdp")
    acts = ",".join(["0"] * mdp.n_states)
    env = make_env("mdp", path=str(tmp_path / "k.mdp"), expert=acts)
    assert env.feature_dim == mdp.n_states
    with pytest.raises(UnknownEnvError):
        make_env("mdp", path=str(tmp_path / "k.mdp"), expert="0")
