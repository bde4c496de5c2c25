"""Individual (6D) and group (2D) deviation descriptors, cohort statistics.

All angle arithmetic is circular: differences are wrapped to (-pi, pi] and
heading spread is the RMS of wrapped deviations about the circular mean.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .scene import AgentTrack, Scenario, wrap_angle


class DeviationValue(NamedTuple):
    values: np.ndarray
    degenerate: bool


@dataclass(frozen=True)
class DeviationBundle:
    individual: np.ndarray  # [T_o, 6]
    group: np.ndarray  # [T_o, 2]
    individual_degenerate: np.ndarray  # [T_o] bool
    group_degenerate: np.ndarray  # [T_o] bool


def circular_mean(angles) -> float:
    a = np.asarray(angles, dtype=float)
    return float(np.arctan2(np.sin(a).mean(), np.cos(a).mean()))


def circular_std(angles) -> float:
    """RMS of wrapped deviations about the circular mean; exactly 0 for a constant."""
    a = np.asarray(angles, dtype=float)
    if a.size == 0 or np.all(a == a[0]):
        return 0.0
    dev = wrap_angle(a - circular_mean(a))
    return float(np.sqrt(np.mean(dev**2)))


def _std(x) -> float:
    x = np.asarray(x, dtype=float)
    if x.size == 0 or np.all(x == x[0]):
        return 0.0
    return float(np.sqrt(np.mean((x - x.mean()) ** 2)))


def displacement_orientations(track: AgentTrack) -> np.ndarray:
    """Orientation of the displacement vector per step, carried forward over zero moves.

    Steps before the first nonzero displacement take the heading at that step.
    """
    disp = track.displacements
    alpha = np.array(track.headings, dtype=float, copy=True)
    known = None
    for t in range(len(alpha)):
        dx, dy = disp[t]
        if track.mask[t] and (dx != 0.0 or dy != 0.0):
            known = float(np.arctan2(dy, dx))
        if known is not None:
            alpha[t] = known
    return alpha


def _first_alpha(track: AgentTrack) -> float | None:
    disp = track.displacements
    for t in range(len(disp)):
        if track.mask[t] and (disp[t, 0] != 0.0 or disp[t, 1] != 0.0):
            return float(np.arctan2(disp[t, 1], disp[t, 0]))
    return None


def individual_deviation(target: AgentTrack, t: int) -> DeviationValue:
    """[th_t - th_0, th_t - a_0, th_t - a_t, std(th), v_t - v_0, std(v)] over valid steps 0..t."""
    if not 0 <= t < len(target.mask):
        raise IndexError(f"step {t} outside observed window")
    steps = np.flatnonzero(target.mask[: t + 1])
    if steps.size < 2:
        return DeviationValue(np.zeros(6), True)
    th = target.headings[steps]
    v = target.velocities[steps]
    th_t, v_t = th[-1], v[-1]
    a0 = _first_alpha(target)
    alpha = displacement_orientations(target)
    a0 = th_t if a0 is None else a0
    values = np.array([
        wrap_angle(th_t - th[0]),
        wrap_angle(th_t - a0),
        wrap_angle(th_t - alpha[steps[-1]]),
        circular_std(th),
        v_t - v[0],
        _std(v),
    ])
    return DeviationValue(values, False)


def group_deviation(scenario: Scenario, t: int) -> DeviationValue:
    """[mean_n(v_n - v_target), circular std of neighbor headings] at step t."""
    tgt = scenario.target
    nbs = [a for a in scenario.agents if a.kind != "target" and a.mask[t]]
    if not nbs:
        return DeviationValue(np.zeros(2), True)
    speeds = np.array([a.velocities[t] for a in nbs])
    heads = np.array([a.headings[t] for a in nbs])
    return DeviationValue(np.array([np.mean(speeds - tgt.velocities[t]), circular_std(heads)]), False)


def deviation_bundle(scenario: Scenario) -> DeviationBundle:
    T = scenario.t_obs
    ind = np.zeros((T, 6))
    grp = np.zeros((T, 2))
    ind_deg = np.zeros(T, dtype=bool)
    grp_deg = np.zeros(T, dtype=bool)
    for t in range(T):
        d = individual_deviation(scenario.target, t)
        ind[t], ind_deg[t] = d.values, d.degenerate
        g = group_deviation(scenario, t)
        grp[t], grp_deg[t] = g.values, g.degenerate
    return DeviationBundle(ind, grp, ind_deg, grp_deg)


# ---------------------------------------------------------------------------
# Cohort statistics

COHORT_METRICS = ("dV_ind", "dH_ind", "sigma_V_ind", "sigma_H_ind", "dV_grp", "sigma_H_grp")
_DEGREES = {"dH_ind", "sigma_H_ind", "sigma_H_grp"}


def summary_features(bundle: DeviationBundle) -> dict:
    """End-of-window values of the six cohort metrics, angles in degrees."""
    ind, grp = bundle.individual[-1], bundle.group[-1]
    raw = {
        "dV_ind": ind[4],
        "dH_ind": ind[0],
        "sigma_V_ind": ind[5],
        "sigma_H_ind": ind[3],
        "dV_grp": grp[0],
        "sigma_H_grp": grp[1],
    }
    return {k: float(np.degrees(v)) if k in _DEGREES else float(v) for k, v in raw.items()}


def cohort_size(n: int, quantile: float) -> int:
    return int(np.floor(n * quantile + 1e-9))


def cohort_stats(corpus: Sequence[Scenario], scores: Sequence[float], quantile: float = 0.1,
                 bundles: Sequence[DeviationBundle] | None = None) -> list:
    """Mean and std of each metric over the bottom-quantile (head) and top-quantile (tail) cohorts."""
    if len(scores) != len(corpus):
        raise ValueError("scores must align with corpus")
    m = cohort_size(len(corpus), quantile)
    if m < 1:
        raise ValueError(f"quantile {quantile} leaves an empty cohort over {len(corpus)} scenarios")
    if bundles is None:
        bundles = [deviation_bundle(s) for s in corpus]
    feats = [summary_features(b) for b in bundles]
    order = np.argsort(np.asarray(scores, dtype=float), kind="stable")
    head, tail = order[:m], order[len(order) - m:]
    rows = []
    for name in COHORT_METRICS:
        col = np.array([f[name] for f in feats])
        rows.append({
            "metric": name,
            "head_mean": float(col[head].mean()), "head_std": float(col[head].std()),
            "tail_mean": float(col[tail].mean()), "tail_std": float(col[tail].std()),
            "n": m,
        })
    return rows


def cohort_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "head_mean", "head_std", "tail_mean", "tail_std"])
    for r in rows:
        w.writerow([r["metric"], repr(r["head_mean"]), repr(r["head_std"]),
                    repr(r["tail_mean"]), repr(r["tail_std"])])
    return buf.getvalue()
