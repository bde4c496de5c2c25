"""Synthetic head/tail scenario corpora.

Head scenarios are constant-velocity lane following with small sensor
noise. Tail scenarios carry one maneuver (hard brake, turn, lane change,
stop-and-go) whose onset straddles the end of the observation window, so
part of it is visible in the history and part only in the future.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .numerics import RngStream
from .scene import HORIZONS, AgentTrack, MapPolyline, Scenario, fill_masked, rigid_transform, wrap_angle

MANEUVERS = ("brake", "turn", "lane_change", "stop_and_go")


@dataclass
class SynthConfig:
    t_obs: int = HORIZONS["desk"][0]
    t_fut: int = HORIZONS["desk"][1]
    hz: float = HORIZONS["desk"][2]
    max_agents: int = 16
    neighbors: tuple = (2, 6)
    speed: tuple = (9.0, 13.0)
    lane_width: float = 3.5
    polyline_points: int = 10
    pos_noise: float = 0.01
    heading_noise: float = 0.002
    speed_noise: float = 0.03
    future_noise: float = 0.1
    neighbor_dropout: float = 0.3
    # head scenarios keep every |individual deviation entry| under these
    # (degrees for the four angle entries, m/s for the two speed entries)
    head_thresholds: tuple = (5.0, 5.0, 5.0, 2.0, 0.5, 0.3)

    @classmethod
    def for_horizon(cls, name: str, **kw) -> "SynthConfig":
        t_obs, t_fut, hz = HORIZONS[name]
        return cls(t_obs=t_obs, t_fut=t_fut, hz=hz, **kw)


@dataclass
class _Path:
    xy: np.ndarray  # [T, 2]
    heading: np.ndarray  # [T]
    speed: np.ndarray  # [T]


def _integrate(p0, theta0, speed, curvature, dt) -> _Path:
    """Unicycle rollout; heading[t] is the direction of travel from t to t+1."""
    n = len(speed)
    xy = np.zeros((n, 2))
    th = np.zeros(n)
    xy[0] = p0
    th[0] = theta0
    for t in range(n - 1):
        step = speed[t] * dt
        xy[t + 1] = xy[t] + step * np.array([math.cos(th[t]), math.sin(th[t])])
        th[t + 1] = th[t] + curvature[t] * step
    return _Path(xy, th, np.asarray(speed, dtype=float))


def _straight(p0, theta, speed, dt) -> _Path:
    speed = np.asarray(speed, dtype=float)
    return _integrate(p0, theta, speed, np.zeros_like(speed), dt)


def _lane_segments(y, x0, x1, n_seg, pts):
    edges = np.linspace(x0, x1, n_seg + 1)
    return [np.stack([np.linspace(a, b, pts), np.full(pts, y)], axis=1) for a, b in zip(edges[:-1], edges[1:])]


def _resample(path_xy: np.ndarray, pts: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(path_xy, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0:
        return np.repeat(path_xy[:1], pts, axis=0)
    q = np.linspace(0.0, s[-1], pts)
    return np.stack([np.interp(q, s, path_xy[:, 0]), np.interp(q, s, path_xy[:, 1])], axis=1)


class _Builder:
    def __init__(self, cfg: SynthConfig, gen: np.random.Generator):
        self.cfg = cfg
        self.gen = gen
        self.T = cfg.t_obs + cfg.t_fut
        self.dt = 1.0 / cfg.hz
        self.now = cfg.t_obs - 1

    def onset(self, lo=-8, hi=4):
        return self.now + int(self.gen.integers(lo, hi + 1))

    def observe(self, path: _Path, kind: str, drop: bool) -> AgentTrack:
        cfg, gen, n = self.cfg, self.gen, self.cfg.t_obs
        mask = np.ones(n, dtype=bool)
        if drop and gen.random() < cfg.neighbor_dropout:
            mask[: int(gen.integers(1, 6))] = False
        pos = path.xy[:n] + gen.normal(0, cfg.pos_noise, (n, 2))
        head = wrap_angle(path.heading[:n] + gen.normal(0, cfg.heading_noise, n))
        spd = np.maximum(path.speed[:n] + gen.normal(0, cfg.speed_noise, n), 0.0)
        first = int(np.flatnonzero(mask)[0])
        pos[:first], head[:first], spd[:first] = pos[first], head[first], spd[first]
        fut = path.xy[n:] + gen.normal(0, cfg.future_noise, (len(path.xy) - n, 2))
        return AgentTrack(pos, head, spd, mask, kind, future=fut)

    # --- target motion ---------------------------------------------------

    def cruise(self, v0):
        return _straight(self._start(v0), 0.0, np.full(self.T, v0), self.dt), {}

    def _start(self, v0):
        # target reaches x ~ 0 at the last observed step
        return np.array([-v0 * self.dt * self.now, 0.0])

    def brake(self, v0):
        t0 = self.onset(-6, 1)
        decel = self.gen.uniform(5.0, 8.0)
        t = np.arange(self.T)
        v = np.where(t < t0, v0, np.maximum(v0 - decel * (t - t0) * self.dt, 0.0))
        return _straight(self._start(v0), 0.0, v, self.dt), {"onset": t0, "decel": decel}

    def stop_and_go(self, v0):
        t0 = self.onset(-4, 2)
        amp = self.gen.uniform(0.8, 1.0) * v0
        period = self.gen.uniform(3.0, 4.0)
        t = np.arange(self.T)
        phase = 2 * math.pi * (t - t0) * self.dt / period
        # slow down to near standstill and pull away again
        v = np.where(t < t0, v0, np.maximum(v0 - amp * 0.5 * (1 - np.cos(phase)), 0.0))
        return _straight(self._start(v0), 0.0, v, self.dt), {"onset": t0, "amp": amp}

    def turn(self, v0):
        t0 = self.onset(-8, 2)
        angle = self.gen.uniform(math.pi / 4, math.pi / 2) * self.gen.choice([-1.0, 1.0])
        radius = self.gen.uniform(12.0, 25.0)
        t = np.arange(self.T)
        kappa = np.zeros(self.T)
        arc_steps = int(math.ceil(abs(angle) * radius / (v0 * self.dt)))
        kappa[(t >= t0) & (t < t0 + arc_steps)] = math.copysign(1.0 / radius, angle)
        path = _integrate(self._start(v0), 0.0, np.full(self.T, v0), kappa, self.dt)
        # exact total heading change
        return path, {"onset": t0, "angle": float(path.heading[-1])}

    def lane_change(self, v0):
        t0 = self.onset(-10, 0)
        dur = self.gen.uniform(2.5, 3.5) / self.dt
        side = self.gen.choice([-1.0, 1.0])
        w = self.cfg.lane_width * side
        t = np.arange(self.T, dtype=float)
        u = np.clip((t - t0) / dur, 0.0, 1.0)
        y = w * (3 * u**2 - 2 * u**3)
        dy = w * (6 * u - 6 * u**2) / dur / self.dt * ((t >= t0) & (t <= t0 + dur))
        x = self._start(v0)[0] + v0 * self.dt * t
        xy = np.stack([x, y], axis=1)
        return _Path(xy, np.arctan2(dy, v0), np.hypot(v0, dy)), {"onset": t0, "side": side}


def _neighbors(b: _Builder, maneuver: str, target: _Path, v0: float, info: dict, n: int):
    cfg, gen = b.cfg, b.gen
    out = []
    t = np.arange(b.T)
    for i in range(n):
        lane = int(gen.integers(-1, 2))
        gap = gen.uniform(12.0, 35.0) * gen.choice([-1.0, 1.0])
        if lane == 0 and abs(gap) < 15:
            gap = math.copysign(15.0, gap)
        y0 = lane * cfg.lane_width
        vn = v0 + gen.normal(0.0, 0.4)
        x0 = target.xy[0, 0] + gap
        speed = np.full(b.T, vn)
        if maneuver == "brake":
            # surrounding traffic slows ahead of the target
            t1 = info["onset"] - int(gen.integers(2, 8))
            speed = np.where(t < t1, vn, np.maximum(vn - 4.0 * (t - t1) * b.dt, 0.0))
        elif maneuver == "stop_and_go":
            shift = gen.uniform(0.0, 1.5)
            phase = 2 * math.pi * ((t - info["onset"]) * b.dt - shift) / 3.0
            speed = np.where(t < info["onset"], vn, np.maximum(vn - 0.5 * vn * np.sin(phase), 0.0))
        elif maneuver == "lane_change" and i == 0:
            # slow leader in the target's own lane
            y0, x0 = 0.0, target.xy[0, 0] + gen.uniform(20.0, 30.0)
            speed = np.full(b.T, max(v0 - gen.uniform(3.0, 5.0), 1.0))
        elif maneuver == "turn" and i < 2:
            # cross traffic on the intersecting road
            direction = gen.choice([-1.0, 1.0])
            cross_x = target.xy[b.now, 0] + gen.uniform(10.0, 25.0)
            start = np.array([cross_x, -direction * gen.uniform(15.0, 40.0)])
            out.append(_straight(start, direction * math.pi / 2, np.full(b.T, gen.uniform(6.0, 12.0)), b.dt))
            continue
        out.append(_straight(np.array([x0, y0]), 0.0, speed, b.dt))
    return out


def _polylines(b: _Builder, maneuver: str, target: _Path, neighbors) -> list:
    cfg = b.cfg
    pts = cfg.polyline_points
    lanes = []
    for k in (-1, 0, 1):
        lanes += _lane_segments(k * cfg.lane_width, -60.0, 60.0, 3, pts)
    if maneuver == "turn":
        # the turning lane: target path through the intersection, extended
        future = target.xy[b.now:]
        ext = future[-1] + 20.0 * np.array([math.cos(target.heading[-1]), math.sin(target.heading[-1])])
        path = np.vstack([future, ext])
        mid = len(path) // 2
        lanes.append(_resample(path[: mid + 1], pts))
        lanes.append(_resample(path[mid:], pts))
        x = float(neighbors[0].xy[0, 0]) if neighbors else target.xy[b.now, 0] + 15.0
        lanes.append(np.stack([np.full(pts, x), np.linspace(-40.0, 40.0, pts)], axis=1))
    return [MapPolyline(p) for p in lanes]


def generate_synthetic(n: int, tail_fraction: float, rng: RngStream, config: SynthConfig | None = None,
                       split: str = "train", id_prefix: str = "syn") -> list:
    """Deterministic corpus of ``n`` scenarios, ``round(n * tail_fraction)`` of them tails.

    Scenarios are emitted in a random world frame (random rotation and
    translation) so that frame normalization is exercised downstream.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= tail_fraction <= 1.0:
        raise ValueError("tail_fraction must lie in [0, 1]")
    cfg = config or SynthConfig()
    n_tail = int(round(n * tail_fraction))
    order = rng.numpy().permutation(n)
    is_tail = np.zeros(n, dtype=bool)
    is_tail[order[:n_tail]] = True
    tail_kinds = rng.substream(1).numpy().integers(0, len(MANEUVERS), size=n)

    out = []
    for i in range(n):
        gen = rng.substream(2, i).numpy()
        b = _Builder(cfg, gen)
        v0 = gen.uniform(*cfg.speed)
        maneuver = MANEUVERS[tail_kinds[i]] if is_tail[i] else "cruise"
        if maneuver == "turn":
            v0 = gen.uniform(6.0, 10.0)
        target, info = getattr(b, maneuver)(v0)
        lo, hi = cfg.neighbors
        n_nb = min(int(gen.integers(lo, hi + 1)), cfg.max_agents - 1)
        nbs = _neighbors(b, maneuver, target, v0, info, n_nb)
        agents = [b.observe(target, "target", drop=False)] + [b.observe(p, "neighbor", drop=True) for p in nbs]
        polys = _polylines(b, maneuver, target, nbs)
        label = {"kind": "tail" if is_tail[i] else "head", "maneuver": maneuver}
        sc = Scenario(
            id=f"{id_prefix}-{i:05d}", agents=agents, polylines=polys,
            future=agents[0].future if split in ("train", "val") else None,
            t_obs=cfg.t_obs, t_fut=cfg.t_fut, hz=cfg.hz, split=split, label=label,
        )
        if split == "test":
            sc = replace(sc, agents=[replace(a, future=None) for a in agents])
        angle = gen.uniform(-math.pi, math.pi)
        shift = gen.uniform(-50.0, 50.0, 2)
        out.append(_round_trip_safe(rigid_transform(sc, angle, shift)))
    return out


def _round_trip_safe(sc: Scenario) -> Scenario:
    # masked steps are stored forward-filled, matching what the loader rebuilds
    agents = [replace(a, positions=fill_masked(a.positions, a.mask), headings=fill_masked(a.headings, a.mask),
                      velocities=fill_masked(a.velocities, a.mask)) for a in sc.agents]
    return replace(sc, agents=agents)
