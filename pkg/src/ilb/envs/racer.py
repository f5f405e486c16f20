"""Top-down kart racing on a closed track.

The kart drives at fixed speed; the only control is steering in [-1, 1]
(positive turns right). Leaving the road counts a fall and puts the kart back
on the centerline. Observations are a binary raster of the road ahead in the
kart's frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from ..core import ActionSpec, Environment, ExpertPolicy, ILBError, StateObs


class TrackError(ILBError, ValueError):
    pass


@njit(cache=True)
def _project(points, tangent, seg_len, px, py, start, count):
    n = points.shape[0]
    best, best_k, best_u, best_side = np.inf, 0, 0.0, 0.0
    for j in range(count):
        k = (start + j) % n
        rx = px - points[k, 0]
        ry = py - points[k, 1]
        u = rx * tangent[k, 0] + ry * tangent[k, 1]
        u = min(max(u, 0.0), seg_len[k])
        dx = rx - u * tangent[k, 0]
        dy = ry - u * tangent[k, 1]
        d = dx * dx + dy * dy
        if d < best:
            best, best_k, best_u = d, k, u
            best_side = tangent[k, 0] * dy - tangent[k, 1] * dx
    d = np.sqrt(best)
    return best_k, best_u, d if best_side >= 0 else -d


@njit(cache=True)
def _raster(bitmap, ox, oy, res, grid, px, py, ch, sh):
    out = np.zeros(grid.shape[0])
    nx, ny = bitmap.shape
    for k in range(grid.shape[0]):
        f, l = grid[k, 0], grid[k, 1]
        i = int(np.floor((px + f * ch - l * sh - ox) / res + 0.5))
        j = int(np.floor((py + f * sh + l * ch - oy) / res + 0.5))
        if 0 <= i < nx and 0 <= j < ny and bitmap[i, j]:
            out[k] = 1.0
    return out


@dataclass
class Track:
    points: np.ndarray  # (n, 2) closed centerline, last point connects to the first
    width: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or len(self.points) < 3:
            raise TrackError("track needs at least 3 centerline points (x, y)")
        if not self.width > 0:
            raise TrackError("track width must be positive")
        nxt = np.roll(self.points, -1, axis=0)
        seg = nxt - self.points
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(self.seg_len <= 0):
            raise TrackError("repeated centerline point")
        self.tangent = seg / self.seg_len[:, None]
        self.arc = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.arc[-1])

    def project(self, p: np.ndarray, hint: int | None = None, window: int = 12):
        """Nearest centerline point: (segment, fraction, signed offset, arc length).

        Offset is positive to the left of the driving direction.
        """
        n = len(self.points)
        if hint is None:
            start, count = 0, n
        else:
            start, count = (hint - window) % n, min(2 * window + 1, n)
        seg, u, off = _project(self.points, self.tangent, self.seg_len, float(p[0]),
                               float(p[1]), start, count)
        return int(seg), u / self.seg_len[seg], off, float(self.arc[seg] + u)

    def point_at(self, s: float) -> np.ndarray:
        s = s % self.length
        seg = int(np.searchsorted(self.arc, s, side="right") - 1)
        seg = min(seg, len(self.points) - 1)
        return self.points[seg] + self.tangent[seg] * (s - self.arc[seg])

    def heading_at(self, s: float) -> float:
        s = s % self.length
        seg = min(int(np.searchsorted(self.arc, s, side="right") - 1), len(self.points) - 1)
        tx, ty = self.tangent[seg]
        return math.atan2(ty, tx)


def default_track(n: int = 240, radius: float = 18.0, width: float = 2.0) -> Track:
    """A smooth closed loop with tight and loose bends (counter-clockwise)."""
    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    r = radius * (1 + 0.28 * np.sin(2 * th) + 0.12 * np.cos(3 * th + 0.5))
    return Track(np.c_[r * np.cos(th), r * np.sin(th)], width)


def write_track(track: Track, path: str | Path, speed: float | None = None) -> None:
    head = f"ilb-track v1 width={float(track.width)!r}"
    if speed:
        head += f" speed={float(speed)!r}"
    rows = [f"{float(x)!r} {float(y)!r}" for x, y in track.points]
    Path(path).write_text(head + "\n" + "\n".join(rows) + "\n")


def read_track(path: str | Path) -> Track:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("ilb-track v1"):
        raise TrackError(f"{path}: missing 'ilb-track v1' header")
    hdr = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    pts = []
    for k, ln in enumerate(lines[1:], start=2):
        try:
            x, y = (float(v) for v in ln.split())
        except ValueError as exc:
            raise TrackError(f"{path}:{k}: expected 'x y'") from exc
        pts.append((x, y))
    return Track(np.array(pts), float(hdr.get("width", 3.0)))


@dataclass
class RacerConfig:
    speed: float = 0.6
    max_turn: float = 0.15  # radians per step at full steer
    steer_noise: float = 0.03  # std of heading noise per step
    grid_cols: int = 25  # lateral cells
    grid_rows: int = 19  # cells ahead
    view_width: float = 10.0
    view_depth: float = 12.0
    bitmap_res: float = 0.1
    start_jitter: float = 0.3  # max |offset| and half heading range (x0.3 rad) at reset
    lookahead: float = 4.0
    action_history: int = 2  # recent steering commands shown as the kart's pose
    horizon: int = 0  # 0 means one lap's worth of steps


class RacerEnv(Environment):
    """Fixed-speed kart on a closed track; cost 1 per fall."""

    name = "racer"
    primary_metric = "falls_per_lap"

    def __init__(self, track: Track | None = None, config: RacerConfig | None = None):
        self.track = track or default_track()
        self.cfg = config or RacerConfig()
        c = self.cfg
        self.action_spec = ActionSpec("continuous", 1, -1.0, 1.0)
        self.feature_dim = c.grid_cols * c.grid_rows + c.action_history
        self.horizon = c.horizon or int(math.ceil(self.track.length / c.speed))
        self._build_bitmap()
        lat = (np.arange(c.grid_cols) - (c.grid_cols - 1) / 2) * (c.view_width / c.grid_cols)
        ahead = (np.arange(c.grid_rows) + 0.5) * (c.view_depth / c.grid_rows)
        A, Lt = np.meshgrid(ahead, lat, indexing="ij")
        self._grid = np.c_[A.ravel(), Lt.ravel()]  # (forward, left) offsets
        self._pos = np.zeros(2)
        self._heading = 0.0
        self._seg = 0
        self._rng = np.random.default_rng(0)

    def _build_bitmap(self):
        c, tr = self.cfg, self.track
        margin = c.view_depth + c.view_width
        lo = tr.points.min(axis=0) - margin
        hi = tr.points.max(axis=0) + margin
        nx, ny = (np.ceil((hi - lo) / c.bitmap_res).astype(int) + 1)
        best = np.full((nx, ny), np.inf)
        reach = tr.width / 2 + 2 * c.bitmap_res
        for a, t, L in zip(tr.points, tr.tangent, tr.seg_len):
            b = a + t * L
            i0, j0 = np.floor((np.minimum(a, b) - reach - lo) / c.bitmap_res).astype(int)
            i1, j1 = np.ceil((np.maximum(a, b) + reach - lo) / c.bitmap_res).astype(int) + 1
            xs = lo[0] + np.arange(i0, i1) * c.bitmap_res
            ys = lo[1] + np.arange(j0, j1) * c.bitmap_res
            rx = xs[:, None] - a[0]
            ry = ys[None, :] - a[1]
            u = np.clip(rx * t[0] + ry * t[1], 0, L)
            d = np.hypot(rx - u * t[0], ry - u * t[1])
            np.minimum(best[i0:i1, j0:j1], d, out=best[i0:i1, j0:j1])
        self._bitmap = best <= tr.width / 2
        self._origin = lo

    def road(self, world_pts: np.ndarray) -> np.ndarray:
        ij = np.floor((world_pts - self._origin) / self.cfg.bitmap_res + 0.5).astype(int)
        nx, ny = self._bitmap.shape
        ok = (ij[:, 0] >= 0) & (ij[:, 0] < nx) & (ij[:, 1] >= 0) & (ij[:, 1] < ny)
        out = np.zeros(len(ij), dtype=bool)
        out[ok] = self._bitmap[ij[ok, 0], ij[ok, 1]]
        return out

    def features(self, pos, heading) -> np.ndarray:
        return _raster(self._bitmap, self._origin[0], self._origin[1], self.cfg.bitmap_res,
                       self._grid, float(pos[0]), float(pos[1]), math.cos(heading),
                       math.sin(heading))

    def _features(self) -> np.ndarray:
        return np.concatenate([self.features(self._pos, self._heading), self._recent])

    def _obs(self) -> StateObs:
        internal = (self._pos.copy(), self._heading, self._seg)
        return StateObs(features=self._features(), t=self._t,
                        internal=internal)

    def reset(self, rng):
        self._rng = rng
        c, tr = self.cfg, self.track
        s0 = rng.uniform(0, tr.length)
        off = rng.uniform(-c.start_jitter, c.start_jitter)
        base = tr.point_at(s0)
        h = tr.heading_at(s0)
        normal = np.array([-math.sin(h), math.cos(h)])
        self._pos = base + off * normal
        self._heading = h + rng.uniform(-0.3, 0.3) * c.start_jitter
        self._seg = tr.project(self._pos)[0]
        self._t = 1
        self._falls = 0
        self._dist = 0.0
        self._recent = np.zeros(c.action_history)
        return self._obs()

    def step(self, action):
        c, tr = self.cfg, self.track
        steer = float(np.clip(np.asarray(action, float).ravel()[0], -1, 1))
        self._heading -= steer * c.max_turn
        if c.action_history:
            self._recent[1:] = self._recent[:-1].copy()
            self._recent[0] = steer
        if c.steer_noise:
            self._heading += self._rng.normal(0.0, c.steer_noise)
        self._pos = self._pos + c.speed * np.array([math.cos(self._heading),
                                                    math.sin(self._heading)])
        self._dist += c.speed
        seg, frac, off, s = tr.project(self._pos, self._seg)
        self._seg = seg
        cost = 0.0
        if abs(off) > tr.width / 2:
            self._falls += 1
            cost = 1.0
            self._pos = tr.point_at(s)
            self._heading = tr.heading_at(s)
        self._t += 1
        return self._obs(), cost, False

    def episode_metrics(self):
        laps = self._dist / self.track.length
        return {"falls": float(self._falls), "laps": laps,
                "falls_per_lap": self._falls / laps if laps > 0 else 0.0}

    def offset(self, pos=None, seg=None) -> float:
        pos = self._pos if pos is None else pos
        return self.track.project(pos, self._seg if seg is None else seg)[2]

    def expert(self):
        return ExpertPolicy(lambda st: pure_pursuit_expert(self, st), self.action_spec,
                            "pure_pursuit")


def pure_pursuit_expert(env: RacerEnv, state: StateObs) -> np.ndarray:
    """Steer toward a centerline point ``lookahead`` ahead (positive = right)."""
    pos, heading, seg = state.internal
    tr, c = env.track, env.cfg
    s = tr.project(pos, seg)[3]
    target = tr.point_at(s + c.lookahead)
    d = target - pos
    alpha = math.atan2(d[1], d[0]) - heading
    alpha = (alpha + math.pi) % (2 * math.pi) - math.pi
    dist = max(math.hypot(*d), 1e-9)
    curvature = 2.0 * math.sin(alpha) / dist
    steer = -c.speed * curvature / c.max_turn
    return np.array([min(1.0, max(-1.0, steer))])
