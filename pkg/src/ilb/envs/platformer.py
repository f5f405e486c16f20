"""Side-scrolling platformer on a 1D column map.

Each column has a height: 0 is a pit, 1 is ground, 2 and 3 are walls the
agent must jump onto or over. Actions are four buttons packed into a 4-bit
integer (left=1, right=2, jump=4, speed=8). The expert plans with the true
simulator over a short lookahead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from ..core import ActionSpec, Environment, ExpertPolicy, ILBError, StateObs, derive_seed

LEFT, RIGHT, JUMP, SPEED = 1, 2, 4, 8
PIT = 0
HALF_WIDTH = 0.3


class StageError(ILBError, ValueError):
    pass


@dataclass(frozen=True)
class Physics:
    slow: float = 0.25
    fast: float = 0.5
    gravity: float = 0.15
    jump: float = 0.9

    def array(self) -> np.ndarray:
        return np.array([self.slow, self.fast, self.gravity, self.jump])


@njit(cache=True)
def _support(h, x):
    lo = int(math.floor(x - HALF_WIDTH))
    hi = int(math.floor(x + HALF_WIDTH - 1e-9))
    top = -100.0
    for c in range(lo, hi + 1):
        hc = h[c] if 0 <= c < h.shape[0] else 1
        v = -100.0 if hc == PIT else float(hc)
        if v > top:
            top = v
    return top


@njit(cache=True)
def _step(h, phys, x, y, vy, on_ground, action):
    """One simulator step. Returns (x, y, vy, on_ground, dead, blocked)."""
    speed = phys[1] if action & SPEED else phys[0]
    dx = 0.0
    if action & RIGHT:
        dx += speed
    if action & LEFT:
        dx -= speed
    blocked = False
    if dx != 0.0:
        nx = max(x + dx, HALF_WIDTH)
        lo = int(math.floor(nx - HALF_WIDTH))
        hi = int(math.floor(nx + HALF_WIDTH - 1e-9))
        for c in range(lo, hi + 1):
            if 0 <= c < h.shape[0] and h[c] != PIT and h[c] > y + 1e-9:
                blocked = True
                if dx > 0:
                    nx = min(nx, c - HALF_WIDTH)
                else:
                    nx = max(nx, c + 1 + HALF_WIDTH)
        if blocked and abs(nx - x) < 1e-12:
            nx = x
        x = nx
    if on_ground and action & JUMP:
        vy = phys[3]
    vy -= phys[2]
    ny = y + vy
    top = _support(h, x)
    if ny <= top and vy <= 0.0:
        y, vy, on_ground = top, 0.0, True
    else:
        y, on_ground = ny, False
    dead = y < 0.0
    return x, y, vy, on_ground, dead, blocked


@njit(cache=True)
def _simulate(h, phys, x, y, vy, og, first, speed_bit, k1, k2, H, goal):
    """Roll a two-jump plan; returns (steps survived, final x)."""
    for t in range(H):
        if t == 0:
            a = first
        else:
            a = RIGHT | speed_bit
            if t == k1 or t == k2:
                a |= JUMP
        x, y, vy, og, dead, _ = _step(h, phys, x, y, vy, og, a)
        if dead:
            return t, x
        if x >= goal:
            return H, goal
    return H, x


@njit(cache=True)
def _plan(h, phys, x, y, vy, og, H, goal, gap):
    """Best first action over a family of run-and-jump plans.

    Plans are scored by steps survived, then distance. Candidates are tried
    in preference order (right, then speed, then no jump) and only a strictly
    better score replaces the incumbent.
    """
    firsts = np.array([RIGHT | SPEED, RIGHT | SPEED | JUMP, RIGHT, RIGHT | JUMP, 0, JUMP,
                       LEFT | SPEED, LEFT | SPEED | JUMP])
    best = -1e18
    best_a = RIGHT | SPEED
    for fi in range(firsts.shape[0]):
        if fi == 4 and best >= H * 1e4:
            break  # a forward plan survives; idle and backward moves are fallbacks
        first = firsts[fi]
        sb = first & SPEED
        for k1 in range(1, H + 1):
            # a second press only matters once the first jump has landed
            for k2 in range(k1 + gap, H + 2):
                if k1 == H and k2 != H + 1:
                    continue
                alive, fx = _simulate(h, phys, x, y, vy, og, first, sb, k1, k2, H, goal)
                score = alive * 1e4 + fx
                if score > best + 1e-9:
                    best = score
                    best_a = first
    return best_a


def generate_stage(difficulty: int = 1, seed: int = 0, length: int = 120) -> np.ndarray:
    """Deterministic column heights for a stage.

    Flat runway, then obstacles separated by flat stretches: pits up to
    ``1 + difficulty`` wide (capped at 3) and walls of height 2 or 3.
    """
    if difficulty < 1:
        raise StageError("difficulty must be >= 1")
    rng = np.random.default_rng(derive_seed(seed, "stage", difficulty))
    h = [1] * 8
    max_pit = min(1 + difficulty, 3)
    while len(h) < length - 10:
        kind = rng.choice(["pit", "wall", "step"], p=[0.4, 0.4, 0.2])
        if kind == "pit":
            h += [PIT] * int(rng.integers(1, max_pit + 1))
        elif kind == "wall":
            h += [int(rng.choice([2, 3]))] * int(rng.integers(1, 3))
        else:
            h += [2] * int(rng.integers(3, 7))
        h += [1] * int(rng.integers(4, 9))
    h += [1] * (length - len(h))
    return np.array(h[:length], dtype=np.int64)


def write_stage(h: np.ndarray, path: str | Path) -> None:
    Path(path).write_text(f"ilb-stage v1 length={len(h)}\n" + " ".join(map(str, h)) + "\n")


def read_stage(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text().split("\n", 1)
    if not lines[0].startswith("ilb-stage v1"):
        raise StageError(f"{path}: missing 'ilb-stage v1' header")
    try:
        h = np.array([int(v) for v in lines[1].split()], dtype=np.int64)
    except (IndexError, ValueError) as exc:
        raise StageError(f"{path}: bad column list") from exc
    if h.size == 0 or h.min() < 0 or h.max() > 3:
        raise StageError(f"{path}: column heights must lie in 0..3")
    return h


@dataclass
class PlatformerConfig:
    difficulty: int = 1
    length: int = 120
    horizon: int = 400
    stage_seed: int | None = None  # fixed stage; None draws a stage per episode
    view_back: int = 2
    view_ahead: int = 9
    rows: int = 4
    history: int = 4
    lookahead: int = 16
    stuck_steps: int = 50


class PlatformerEnv(Environment):
    name = "platformer"
    primary_metric = "distance"

    def __init__(self, config: PlatformerConfig | None = None, physics: Physics | None = None):
        self.cfg = config or PlatformerConfig()
        self.phys = physics or Physics()
        self._phys = self.phys.array()
        c = self.cfg
        self.action_spec = ActionSpec("discrete", 16)
        self.n_cols = c.view_back + c.view_ahead + 1
        self.feature_dim = self.n_cols * c.rows + 7 + 3 + 4 + 3 + 4 * c.history
        self.horizon = c.horizon
        self._fixed = (generate_stage(c.difficulty, c.stage_seed, c.length)
                       if c.stage_seed is not None else None)
        self.stage = self._fixed if self._fixed is not None else generate_stage(
            c.difficulty, 0, c.length)

    # state --------------------------------------------------------------
    def reset(self, rng):
        c = self.cfg
        if self._fixed is None:
            self.stage = generate_stage(c.difficulty, int(rng.integers(2**31)), c.length)
        self.x, self.y, self.vy, self.on_ground = 1.5, 1.0, 0.0, True
        self.best_x = self.x
        self.last_dx = 0.0
        self.t = 1
        self.recent = np.zeros(c.history, dtype=np.int64)
        self.still = 0
        self.stuck = False
        self.dead = False
        self.done_reason = ""
        return self._obs()

    def adjacent_obstacle(self) -> bool:
        """A column taller than the agent's feet directly to its right."""
        c = int(math.floor(self.x + HALF_WIDTH + 1e-6))
        return (0 <= c < len(self.stage) and self.stage[c] != PIT
                and self.stage[c] > self.y + 1e-9
                and c - (self.x + HALF_WIDTH) < 0.05)

    def features(self) -> np.ndarray:
        c = self.cfg
        base = int(math.floor(self.x))
        cols = np.arange(base - c.view_back, base + c.view_ahead + 1)
        inside = (cols >= 0) & (cols < len(self.stage))
        hc = np.where(inside, self.stage[np.clip(cols, 0, len(self.stage) - 1)], 1)
        occ = (hc[None, :] > np.arange(c.rows)[:, None]).astype(float).ravel()
        ybin = np.zeros(7)
        ybin[min(max(int(self.y), 0), 6)] = 1.0
        motion = np.array([float(self.on_ground), float(self.vy > 0), float(self.vy < 0)])
        frac = np.zeros(4)
        frac[min(int((self.x - base) * 4), 3)] = 1.0
        moved = np.zeros(3)  # last horizontal displacement: none, slow, fast
        moved[0 if self.last_dx <= 1e-9 else (1 if self.last_dx < self.phys.fast - 1e-9 else 2)] = 1

        bits = ((self.recent[:, None] >> np.arange(4)) & 1).astype(float).ravel()
        return np.concatenate([occ, ybin, motion, frac, moved, bits])

    def _obs(self):
        internal = (self.stage, self.x, self.y, self.vy, self.on_ground)
        return StateObs(features=self.features(), t=self.t, internal=internal)

    def step(self, action):
        a = int(action)
        x0, xprev = self.best_x, self.x
        self.x, self.y, self.vy, self.on_ground, dead, _ = _step(
            self.stage, self._phys, self.x, self.y, self.vy, self.on_ground, a)
        self.last_dx = self.x - xprev
        self.recent[1:] = self.recent[:-1].copy()
        self.recent[0] = a
        self.best_x = max(self.best_x, self.x)
        self.t += 1
        goal = len(self.stage) - 1
        if self.best_x > x0 + 1e-9 or not self.adjacent_obstacle():
            self.still = 0
        else:
            self.still += 1
        if dead:
            self.dead, self.done_reason = True, "death"
        elif self.x >= goal:
            self.done_reason = "complete"
        elif self.still >= self.cfg.stuck_steps:
            # a deterministic policy facing the same observation stays put
            self.stuck, self.done_reason = True, "stuck"
        done = bool(self.done_reason)
        return self._obs(), float(dead), done

    def episode_metrics(self):
        dist = min(self.best_x, len(self.stage) - 1)
        return {"distance": float(dist), "stuck": float(self.stuck), "dead": float(self.dead),
                "complete": float(self.done_reason == "complete")}

    def expert(self):
        return ExpertPolicy(lambda st: planner_expert(self, st), self.action_spec, "planner")


def planner_expert(env: PlatformerEnv, state: StateObs) -> int:
    """First action of the best plan found with the true simulator."""
    cache = getattr(env, "_plan_cache", None)
    if cache is not None and cache[0] is state:
        return cache[1]
    stage, x, y, vy, og = state.internal
    # earliest useful second press: time to land from a jump on flat ground
    gap = int(2 * env.phys.jump / env.phys.gravity) - 2
    a = int(_plan(stage, env._phys, x, y, vy, og, env.cfg.lookahead, float(len(stage) - 1),
                  max(gap, 1)))
    env._plan_cache = (state, a)
    return a
