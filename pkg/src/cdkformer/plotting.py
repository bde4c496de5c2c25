"""Report figures (Agg backend, fixed metadata so reruns give identical bytes)."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": None}


def _meta(provenance: Optional[str]) -> dict:
    # PNG has no comment line, so the provenance header goes into a text chunk
    return {**_META, "Description": provenance} if provenance else dict(_META)


def plot_feature_bins(rows: Sequence[dict], path, provenance: Optional[str] = None) -> Path:
    """One panel per deviation feature: mean minADE +- standard error against the bin median."""
    features = list(dict.fromkeys(r["feature"] for r in rows))
    if not features:
        raise ValueError("no feature rows to plot")
    cols = min(3, len(features))
    nrows = (len(features) + cols - 1) // cols
    fig, axes = plt.subplots(nrows, cols, figsize=(4 * cols, 3 * nrows), squeeze=False)
    for ax, name in zip(axes.ravel(), features):
        sel = [r for r in rows if r["feature"] == name]
        ax.errorbar([r["median"] for r in sel], [r["mean_minADE"] for r in sel],
                    yerr=[r["stderr"] for r in sel], marker="o", capsize=3)
        ax.set_title(name)
        ax.set_xlabel("bin median")
        ax.set_ylabel("minADE (m)")
    for ax in axes.ravel()[len(features):]:
        ax.set_visible(False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="png", dpi=80, metadata=_meta(provenance))
    plt.close(fig)
    return path


def plot_slices(rows: Sequence[dict], path, provenance: Optional[str] = None) -> Path:
    """Grouped bars of minADE / minFDE / b-minFDE per slice."""
    metrics = ("minADE", "minFDE", "b_minFDE")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / len(metrics)
    for i, m in enumerate(metrics):
        ax.bar([j + i * width for j in range(len(rows))], [r[m] for r in rows], width, label=m)
    ax.set_xticks([j + width for j in range(len(rows))])
    ax.set_xticklabels([r["slice"] for r in rows])
    ax.set_ylabel("meters")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="png", dpi=80, metadata=_meta(provenance))
    plt.close(fig)
    return path
