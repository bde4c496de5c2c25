"""Displacement metrics, miss rate, CVaR, tail-sliced and feature-binned reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

MISS_THRESHOLD = 2.0
PRED_FORMAT = "cdk-pred"
PRED_VERSION = 1
SLICE_COLUMNS = ("slice", "minADE", "minFDE", "b_minFDE", "MR", "count")


@dataclass(frozen=True)
class ScenarioMetrics:
    min_ade: float
    min_fde: float
    b_min_fde: float
    miss: int


def displacement_metrics(trajectories, probs, gt, threshold: float = MISS_THRESHOLD,
                         brier: str = "per-mode") -> ScenarioMetrics:
    """minADE/minFDE over K candidates, b-minFDE and miss flag.

    ``brier="per-mode"`` adds (1/K) sum_k (p_hat_k - p_k)^2 with p one-hot at the
    FDE winner; ``brier="conventional"`` adds (1 - p_hat_winner)^2.
    """
    tr = np.asarray(trajectories, dtype=float)
    p = np.asarray(probs, dtype=float)
    g = np.asarray(gt, dtype=float)
    if tr.ndim != 3 or tr.shape[0] < 1:
        raise ValueError("trajectories must be [K, T, 2] with K >= 1")
    if p.shape != (tr.shape[0],):
        raise ValueError(f"K mismatch: {tr.shape[0]} trajectories vs {p.shape} probs")
    if tr.shape[1:] != g.shape:
        raise ValueError(f"trajectory shape {tr.shape[1:]} vs ground truth {g.shape}")
    dist = np.sqrt(((tr - g) ** 2).sum(axis=-1))
    ade = dist.mean(axis=1)
    fde = dist[:, -1]
    k = int(np.argmin(fde))
    min_fde = float(fde[k])
    if brier == "per-mode":
        onehot = np.zeros_like(p)
        onehot[k] = 1.0
        penalty = float(((p - onehot) ** 2).sum() / len(p))
    elif brier == "conventional":
        penalty = float((1.0 - p[k]) ** 2)
    else:
        raise ValueError(f"unknown b-minFDE variant {brier!r}")
    return ScenarioMetrics(float(ade.min()), min_fde, min_fde + penalty, int(min_fde > threshold))


def cvar(errors, alpha_percent: float) -> float:
    """Mean of the largest ceil(N * (100 - alpha) / 100) errors.

    For 1..100 at alpha 90 this averages 91..100; alpha -> 0 gives the mean and
    alpha -> 100 the maximum.
    """
    e = np.sort(np.asarray(errors, dtype=float))[::-1]
    if e.size == 0:
        raise ValueError("cvar of an empty error list")
    if not 0.0 < alpha_percent < 100.0:
        raise ValueError("alpha_percent must lie in (0, 100)")
    m = max(1, int(math.ceil(round(e.size * (100.0 - alpha_percent) / 100.0, 9))))
    return float(e[:m].mean())


def _aggregate(name: str, rows: Sequence[ScenarioMetrics]) -> dict:
    if not rows:
        raise ValueError(f"slice {name!r} has no scenarios")
    return {
        "slice": name,
        "minADE": float(np.mean([r.min_ade for r in rows])),
        "minFDE": float(np.mean([r.min_fde for r in rows])),
        "b_minFDE": float(np.mean([r.b_min_fde for r in rows])),
        "MR": float(np.mean([r.miss for r in rows])),
        "count": len(rows),
    }


def top_ids(scores: Mapping[str, float], fraction: float) -> list:
    """Ids of the max(1, round(fraction * N)) highest scores (ties broken by id)."""
    n = max(1, int(round(fraction * len(scores))))
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [k for k, _ in ranked[:n]]


def sliced_report(metrics: Mapping[str, ScenarioMetrics], scores: Optional[Mapping[str, float]] = None,
                  fractions: Sequence[float] = (0.10, 0.05), custom: Optional[Mapping[str, Sequence[str]]] = None
                  ) -> list:
    """Rows for "all", each top-fraction tail slice (needs scores) and any custom id sets."""
    rows = [_aggregate("all", list(metrics.values()))]
    if scores is not None:
        missing = set(metrics) - set(scores)
        if missing:
            raise ValueError(f"no score for {len(missing)} scenarios (e.g. {sorted(missing)[0]!r})")
        sub = {k: scores[k] for k in metrics}
        for f in fractions:
            rows.append(_aggregate(f"top-{round(100 * f):g}%", [metrics[i] for i in top_ids(sub, f)]))
    for name, ids in (custom or {}).items():
        rows.append(_aggregate(name, [metrics[i] for i in ids if i in metrics]))
    return rows


def quantile_bins(values, n_bins: int = 5) -> list:
    """Index arrays of ``n_bins`` equal-count bins in increasing value order."""
    v = np.asarray(values, dtype=float)
    if v.size < n_bins:
        raise ValueError(f"need at least {n_bins} values for {n_bins} bins")
    return np.array_split(np.argsort(v, kind="stable"), n_bins)


def feature_bins(features: Mapping[str, Sequence[float]], errors: Sequence[float], n_bins: int = 5) -> list:
    """Per feature and bin: median feature value, mean error and its standard error."""
    err = np.asarray(errors, dtype=float)
    rows = []
    for name, vals in features.items():
        v = np.asarray(vals, dtype=float)
        if v.shape != err.shape:
            raise ValueError(f"feature {name!r} does not align with errors")
        for b, idx in enumerate(quantile_bins(v, n_bins)):
            e = err[idx]
            se = float(e.std(ddof=1) / math.sqrt(len(e))) if len(e) > 1 else 0.0
            rows.append({"feature": name, "bin": b, "count": len(idx), "median": float(np.median(v[idx])),
                         "mean_minADE": float(e.mean()), "stderr": se})
    return rows


def cvar_table(metrics: Mapping[str, ScenarioMetrics], alphas: Sequence[float] = (90, 95, 99)) -> list:
    ade = [m.min_ade for m in metrics.values()]
    fde = [m.min_fde for m in metrics.values()]
    return [{"alpha": a, "minADE": cvar(ade, a), "minFDE": cvar(fde, a)} for a in alphas]


def rows_csv(rows: Sequence[dict], columns: Sequence[str], header: Optional[str] = None) -> str:
    buf = io.StringIO()
    if header:
        buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    cells = [[f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(x.ljust(w) for x, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Prediction dump: header line, then one record per scenario


def dumps_predictions(ids: Sequence[str], preds: Sequence[tuple], provenance: Optional[dict] = None) -> str:
    head = {"format": PRED_FORMAT, "version": PRED_VERSION}
    if provenance:
        head["provenance"] = provenance
    lines = [json.dumps(head, separators=(",", ":"))]
    for sid, (tr, pr) in zip(ids, preds):
        lines.append(json.dumps({"id": sid, "trajectories": np.asarray(tr, float).tolist(),
                                 "probs": np.asarray(pr, float).tolist()}, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def load_predictions(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: parse error: {exc.msg}") from exc
        if lineno == 1:
            if rec.get("format") != PRED_FORMAT or rec.get("version") != PRED_VERSION:
                raise ValueError(f"{path}: not a prediction file of a supported version")
            continue
        out[rec["id"]] = (np.asarray(rec["trajectories"], dtype=float), np.asarray(rec["probs"], dtype=float))
    return out
