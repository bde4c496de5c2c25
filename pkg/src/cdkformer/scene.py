"""Scenario records, the line-delimited corpus format, and frame normalization."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

FORMAT = "cdk-scn"
VERSION = 1

# (t_obs, t_fut, hz)
HORIZONS = {"desk": (20, 30, 10), "av2": (50, 60, 10)}


class ScenarioError(ValueError):
    pass


def wrap_angle(a):
    """Wrap to (-pi, pi]; in-range values pass through untouched."""
    a = np.asarray(a, dtype=float)
    inside = (a > -np.pi) & (a <= np.pi)
    return np.where(inside, a, np.pi - np.mod(np.pi - a, 2 * np.pi))


def fill_masked(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Forward-fill masked rows; leading masked rows take the first valid row."""
    out = np.array(values, dtype=float, copy=True)
    valid = np.flatnonzero(mask)
    if valid.size == 0:
        return out
    last = valid[0]
    for t in range(len(out)):
        if mask[t]:
            last = t
        else:
            out[t] = out[last]
    return out


@dataclass(frozen=True)
class AgentTrack:
    positions: np.ndarray  # [T_o, 2]
    headings: np.ndarray  # [T_o]
    velocities: np.ndarray  # [T_o] speed, m/s
    mask: np.ndarray  # [T_o] bool
    kind: str = "neighbor"
    future: Optional[np.ndarray] = None  # [T_f, 2], optional for neighbors

    @property
    def displacements(self) -> np.ndarray:
        d = np.zeros_like(self.positions)
        d[1:] = self.positions[1:] - self.positions[:-1]
        both = self.mask[1:] & self.mask[:-1]
        d[1:][~both] = 0.0
        return d

    @property
    def last_valid(self) -> int:
        idx = np.flatnonzero(self.mask)
        return int(idx[-1]) if idx.size else -1


@dataclass(frozen=True)
class MapPolyline:
    points: np.ndarray  # [l_m, 2]

    @property
    def displacements(self) -> np.ndarray:
        d = np.zeros_like(self.points)
        d[1:] = self.points[1:] - self.points[:-1]
        return d


@dataclass(frozen=True)
class Scenario:
    id: str
    agents: list
    polylines: list
    future: Optional[np.ndarray]
    t_obs: int
    t_fut: int
    hz: float
    split: str = "train"
    label: dict = field(default_factory=dict)

    @property
    def target_index(self) -> int:
        return next(i for i, a in enumerate(self.agents) if a.kind == "target")

    @property
    def target(self) -> AgentTrack:
        return self.agents[self.target_index]

    @property
    def is_tail(self) -> bool:
        return self.label.get("kind") == "tail"


def validate(s: Scenario) -> None:
    def fail(fld, msg):
        raise ScenarioError(f"scenario {s.id!r}: field {fld}: {msg}")

    if len(s.agents) < 1:
        fail("agents", "N_a must be >= 1")
    kinds = [a.kind for a in s.agents]
    if kinds.count("target") != 1:
        fail("agents.kind", f"exactly one target required, found {kinds.count('target')}")
    for i, a in enumerate(s.agents):
        if a.kind not in ("target", "neighbor"):
            fail(f"agents[{i}].kind", f"unknown kind {a.kind!r}")
        if a.positions.shape != (s.t_obs, 2):
            fail(f"agents[{i}].positions", f"expected shape ({s.t_obs}, 2), got {a.positions.shape}")
        for name in ("headings", "velocities", "mask"):
            if getattr(a, name).shape != (s.t_obs,):
                fail(f"agents[{i}].{name}", f"expected length {s.t_obs}")
        for name in ("positions", "headings", "velocities"):
            if not np.isfinite(getattr(a, name)).all():
                fail(f"agents[{i}].{name}", "non-finite value")
        if a.future is not None:
            if a.future.shape != (s.t_fut, 2) or not np.isfinite(a.future).all():
                fail(f"agents[{i}].future", f"expected finite shape ({s.t_fut}, 2)")
    if not s.target.mask.any():
        fail("agents.mask", "target has no valid step")
    for j, p in enumerate(s.polylines):
        if p.points.ndim != 2 or p.points.shape[1] != 2 or p.points.shape[0] < 2:
            fail(f"polylines[{j}].points", "need l_m >= 2 points of 2 coordinates")
        if not np.isfinite(p.points).all():
            fail(f"polylines[{j}].points", "non-finite value")
    has_future = s.future is not None
    if s.split not in ("train", "val", "test"):
        fail("split", f"unknown split {s.split!r}")
    if has_future != (s.split in ("train", "val")):
        fail("future", f"future must be present iff split is train/val (split={s.split})")
    if has_future and (s.future.shape != (s.t_fut, 2) or not np.isfinite(s.future).all()):
        fail("future", f"expected finite shape ({s.t_fut}, 2)")


# ---------------------------------------------------------------------------
# Corpus file


def header_record(t_obs, t_fut, hz, provenance: Optional[dict] = None) -> dict:
    rec = {"format": FORMAT, "version": VERSION, "t_obs": int(t_obs), "t_fut": int(t_fut), "hz": float(hz)}
    if provenance:
        rec["provenance"] = provenance
    return rec


def _arr(x):
    return None if x is None else np.asarray(x, dtype=float).tolist()


def scenario_to_record(s: Scenario) -> dict:
    agents = []
    for a in s.agents:
        rec = {
            "kind": a.kind,
            "positions": _arr(a.positions),
            "headings": _arr(a.headings),
            "velocities": _arr(a.velocities),
            "mask": [bool(m) for m in a.mask],
        }
        if a.future is not None:
            rec["future"] = _arr(a.future)
        agents.append(rec)
    return {
        "id": s.id,
        "split": s.split,
        "label": s.label,
        "agents": agents,
        "polylines": [{"points": _arr(p.points)} for p in s.polylines],
        "future": _arr(s.future),
    }


def scenario_from_record(rec: dict, t_obs: int, t_fut: int, hz: float) -> Scenario:
    sid = str(rec.get("id", "?"))
    try:
        agents = []
        for a in rec["agents"]:
            mask = np.asarray(a["mask"], dtype=bool)
            fut = a.get("future")
            agents.append(AgentTrack(
                positions=fill_masked(np.asarray(a["positions"], dtype=float).reshape(-1, 2), mask),
                headings=fill_masked(np.asarray(a["headings"], dtype=float), mask),
                velocities=fill_masked(np.asarray(a["velocities"], dtype=float), mask),
                mask=mask,
                kind=a.get("kind", "neighbor"),
                future=None if fut is None else np.asarray(fut, dtype=float).reshape(-1, 2),
            ))
        polys = [MapPolyline(np.asarray(p["points"], dtype=float)) for p in rec.get("polylines", [])]
        future = rec.get("future")
        s = Scenario(
            id=sid, agents=agents, polylines=polys,
            future=None if future is None else np.asarray(future, dtype=float).reshape(-1, 2),
            t_obs=t_obs, t_fut=t_fut, hz=hz,
            split=rec.get("split", "train"), label=rec.get("label") or {},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"scenario {sid!r}: malformed record ({exc})") from exc
    validate(s)
    return s


def dumps_corpus(scenarios: Iterable[Scenario], t_obs: int, t_fut: int, hz: float,
                 provenance: Optional[dict] = None) -> str:
    lines = [json.dumps(header_record(t_obs, t_fut, hz, provenance), separators=(",", ":"))]
    for s in scenarios:
        if (s.t_obs, s.t_fut, s.hz) != (t_obs, t_fut, hz):
            raise ScenarioError(f"scenario {s.id!r}: horizon differs from corpus header")
        lines.append(json.dumps(scenario_to_record(s), separators=(",", ":")))
    return "\n".join(lines) + "\n"


def save_scenarios(path, scenarios, provenance: Optional[dict] = None) -> None:
    scenarios = list(scenarios)
    if scenarios:
        t_obs, t_fut, hz = scenarios[0].t_obs, scenarios[0].t_fut, scenarios[0].hz
    else:
        t_obs, t_fut, hz = HORIZONS["desk"]
    Path(path).write_text(dumps_corpus(scenarios, t_obs, t_fut, hz, provenance), encoding="utf-8")


def read_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    return json.loads(first) if first else {}


def load_scenarios(path) -> list:
    """Parse and validate a corpus file; an empty file gives an empty list."""
    text = Path(path).read_text(encoding="utf-8")
    out = []
    horizon = None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}:{lineno}: parse error: {exc.msg}") from exc
        if rec.get("format") == FORMAT:
            if rec.get("version") != VERSION:
                raise ScenarioError(f"{path}:{lineno}: unsupported version {rec.get('version')}")
            h = (int(rec["t_obs"]), int(rec["t_fut"]), float(rec["hz"]))
            if horizon is not None and h != horizon:
                raise ScenarioError(f"{path}:{lineno}: mixed horizon configs {horizon} vs {h}")
            horizon = h
            continue
        if horizon is None:
            raise ScenarioError(f"{path}:{lineno}: scenario record before header")
        out.append(scenario_from_record(rec, *horizon))
    return out


# ---------------------------------------------------------------------------
# Frame normalization


def _rigid(points: np.ndarray, origin: np.ndarray, c: float, s: float) -> np.ndarray:
    rel = points - origin
    return np.stack([c * rel[..., 0] + s * rel[..., 1], -s * rel[..., 0] + c * rel[..., 1]], axis=-1)


def rigid_transform(sc: Scenario, angle: float, shift) -> Scenario:
    """Rotate by ``angle`` about the origin, then translate by ``shift``."""
    c, s = math.cos(angle), math.sin(angle)
    shift = np.asarray(shift, dtype=float)

    def tf(p):
        if p is None:
            return None
        return np.stack([c * p[..., 0] - s * p[..., 1], s * p[..., 0] + c * p[..., 1]], axis=-1) + shift

    agents = [replace(a, positions=tf(a.positions), future=tf(a.future),
                      headings=wrap_angle(a.headings + angle)) for a in sc.agents]
    polys = [MapPolyline(tf(p.points)) for p in sc.polylines]
    return replace(sc, agents=agents, polylines=polys, future=tf(sc.future))


def normalize_frame(sc: Scenario) -> Scenario:
    """Target's last observed position to the origin, its heading along +x.

    A target that never moves over the window keeps the identity rotation.
    """
    tgt = sc.target
    last = tgt.last_valid
    if last < 0:
        raise ScenarioError(f"scenario {sc.id!r}: target has no valid final pose")
    origin = tgt.positions[last].copy()
    if np.abs(tgt.displacements).sum() == 0.0:
        theta = 0.0
    else:
        theta = float(tgt.headings[last])
    c, s = math.cos(theta), math.sin(theta)

    def tf(p):
        return None if p is None else _rigid(p, origin, c, s)

    agents = [replace(a, positions=tf(a.positions), future=tf(a.future),
                      headings=wrap_angle(a.headings - theta)) for a in sc.agents]
    polys = [MapPolyline(tf(p.points)) for p in sc.polylines]
    return replace(sc, agents=agents, polylines=polys, future=tf(sc.future))
