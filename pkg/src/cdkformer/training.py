"""Winner-takes-all multi-head loss, AdamW + cosine training loop, checkpoints."""
from __future__ import annotations

import base64
import csv
import io
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .decoder import DecoderOutput
from .features import Batch, SceneFeatures, collate, to_world
from .model import CDKFormer, ModelConfig
from .numerics import DTYPE, NO_DROPOUT, DropoutCtx, NonFiniteError, RngStream, cross_entropy, smooth_l1

CHECKPOINT_FORMAT = "cdk-ckpt"
CHECKPOINT_VERSION = 1
LOSS_TERMS = ("mode_reg", "mode_cls", "future_r", "future_t_raw", "future_t", "scene_reg", "scene_cls", "group",
              "total")


@dataclass
class LossBreakdown:
    """Batch means of every term; ``future_t`` is the weighted tail term, ``future_t_raw`` before weighting."""

    mode_reg: torch.Tensor
    mode_cls: torch.Tensor
    future_r: torch.Tensor
    future_t_raw: torch.Tensor
    future_t: torch.Tensor
    scene_reg: torch.Tensor
    scene_cls: torch.Tensor
    group: torch.Tensor
    total: torch.Tensor
    alpha: float = 0.1

    @property
    def mode(self) -> torch.Tensor:
        return self.mode_reg + self.mode_cls

    @property
    def scene(self) -> torch.Tensor:
        return self.scene_reg + self.scene_cls

    def values(self) -> dict:
        return {name: float(getattr(self, name).detach()) for name in LOSS_TERMS}


def winner_index(trajs: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """argmin_k of final displacement error; trajs [B, K, T, 2], gt [B, T, 2] -> [B]."""
    fde = torch.linalg.vector_norm(trajs[:, :, -1] - gt[:, None, -1], dim=-1)
    return fde.detach().argmin(dim=1)


def _wta(trajs, probs, gt):
    k = winner_index(trajs, gt)
    idx = torch.arange(len(k))
    reg = smooth_l1(trajs[idx, k], gt)
    target = torch.nn.functional.one_hot(k, trajs.shape[1]).to(probs.dtype)
    return reg, cross_entropy(probs, target, validate=False)


def compute_loss(out: DecoderOutput, batch: Batch, alpha: float = 0.1,
                 weights: Optional[torch.Tensor] = None) -> LossBreakdown:
    """total = L_mode + L_future_r + alpha * S~ L_future_t + L_scene + L_group, averaged over the batch.

    Heads disabled by an ablation contribute zero. ``weights`` overrides the
    batch's smoothed tail weights.
    """
    if batch.future is None:
        raise ValueError("loss needs ground-truth futures")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    gt = batch.future
    w = batch.weights if weights is None else weights
    zero = gt.new_zeros(gt.shape[0])
    mode_reg = mode_cls = zero
    if out.mode_trajectories is not None:
        mode_reg, mode_cls = _wta(out.mode_trajectories, out.mode_probs, gt)
    future_r = zero if out.regular_trajectory is None else smooth_l1(out.regular_trajectory, gt)
    future_t_raw = zero if out.tail_trajectory is None else smooth_l1(out.tail_trajectory, gt)
    future_t = w * future_t_raw
    scene_reg, scene_cls = _wta(out.trajectories, out.probs, gt)
    n = batch.neighbor_future_mask.shape[1]
    per_nb = smooth_l1(out.group_trajectories[:, :n], batch.neighbor_future)
    group = (per_nb * batch.neighbor_future_mask.to(per_nb.dtype)).sum(dim=1)
    terms = [t.mean() for t in (mode_reg, mode_cls, future_r, future_t_raw, future_t, scene_reg, scene_cls, group)]
    mr, mc, fr, ftr, ft, sr, sc, g = terms
    total = (mr + mc) + fr + alpha * ft + (sr + sc) + g
    return LossBreakdown(mr, mc, fr, ftr, ft, sr, sc, g, total, alpha)


# ---------------------------------------------------------------------------
# Training loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    alpha: float = 0.1
    seed: int = 0
    schedule: str = "cosine"
    clip_norm: float = 5.0
    warmup_steps: int = 10
    use_tail_weights: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Cosine decay from cfg.lr at epoch 0 toward 0 at epoch == epochs."""
    if cfg.schedule == "constant":
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


@dataclass
class EpochLog:
    epoch: int
    lr: float
    losses: dict
    wall_time: float


def metrics_csv(history: Sequence[EpochLog], header: Optional[str] = None, wall_time: bool = False) -> str:
    """Per-epoch loss log. Wall time is opt-in because it breaks byte-for-byte reruns."""
    buf = io.StringIO()
    if header:
        buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "lr", *LOSS_TERMS] + (["wall_time"] if wall_time else []))
    for h in history:
        row = [h.epoch, repr(h.lr)] + [repr(h.losses[k]) for k in LOSS_TERMS]
        w.writerow(row + ([f"{h.wall_time:.3f}"] if wall_time else []))
    return buf.getvalue()


def _batches(n: int, size: int, gen: np.random.Generator):
    order = gen.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def train(model: CDKFormer, feats: Sequence[SceneFeatures], weights: Optional[Sequence[float]], cfg: TrainConfig,
          checkpoint_path: Optional[Path] = None, provenance: Optional[dict] = None,
          on_epoch: Optional[Callable[[EpochLog], None]] = None, verbose: bool = False) -> list:
    """Train in place; returns the per-epoch history. Checkpoints (if a path is given) after every epoch."""
    if not feats:
        raise ValueError("empty training corpus")
    if any(f.future is None for f in feats):
        raise ValueError("training needs ground-truth futures")
    if weights is not None and len(weights) != len(feats):
        raise ValueError("scores must align with the corpus")
    w_all = np.ones(len(feats)) if (weights is None or not cfg.use_tail_weights) else np.asarray(weights, float)
    rng = RngStream(cfg.seed)
    drop = DropoutCtx(model.cfg.dropout, rng.substream(3).torch_generator())
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        model.train()
        sums = dict.fromkeys(LOSS_TERMS, 0.0)
        for bi, idx in enumerate(_batches(len(feats), cfg.batch_size, rng.substream(1, epoch).numpy())):
            batch = collate([feats[i] for i in idx], w_all[idx])
            loss = compute_loss(model(batch, drop), batch, cfg.alpha)
            if not bool(torch.isfinite(loss.total)):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {bi} (ids {batch.ids[:4]})")
            for g in opt.param_groups:
                g["lr"] = lr * min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps else lr
            step += 1
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            for k, v in loss.values().items():
                sums[k] += v * len(idx)
        log = EpochLog(epoch, lr, {k: v / len(feats) for k, v in sums.items()}, time.perf_counter() - t0)
        history.append(log)
        if verbose:
            print(f"epoch {epoch} lr {lr:.2e} loss {log.losses['total']:.4f} ({log.wall_time:.1f}s)", file=sys.stderr)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, cfg, epoch=epoch, provenance=provenance)
        if on_epoch is not None:
            on_epoch(log)
    model.eval()
    return history


@torch.no_grad()
def predict(model: CDKFormer, feats: Sequence[SceneFeatures], batch_size: int = 32, world: bool = True):
    """Per scenario (trajectories [K, T_f, 2], probs [K]) with dropout off.

    ``world`` maps trajectories back into each scenario's own frame.
    """
    model.eval()
    out = []
    for i in range(0, len(feats), batch_size):
        chunk = feats[i:i + batch_size]
        res = model(collate(chunk), NO_DROPOUT)
        for f, tr, pr in zip(chunk, res.trajectories.numpy(), res.probs.numpy()):
            out.append((to_world(f, tr) if world else tr.copy(), pr.copy()))
    return out


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest with base64 little-endian float64 arrays


def _encode(t: torch.Tensor) -> str:
    return base64.b64encode(t.detach().cpu().numpy().astype("<f8").tobytes()).decode("ascii")


def checkpoint_dict(model: CDKFormer, train_cfg: Optional[TrainConfig] = None, epoch: Optional[int] = None,
                    provenance: Optional[dict] = None) -> dict:
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION}
    if provenance:
        doc["provenance"] = provenance
    doc["model_config"] = model.cfg.to_dict()
    if train_cfg is not None:
        doc["train_config"] = train_cfg.to_dict()
    if epoch is not None:
        doc["epoch"] = epoch
    doc["params"] = [{"name": n, "shape": list(p.shape), "dtype": "<f8", "data": _encode(p)}
                     for n, p in model.named_parameters()]
    return doc


def save_checkpoint(path, model: CDKFormer, train_cfg: Optional[TrainConfig] = None, epoch: Optional[int] = None,
                    provenance: Optional[dict] = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(checkpoint_dict(model, train_cfg, epoch, provenance), separators=(",", ":")),
                   encoding="utf-8")
    tmp.replace(path)


def load_checkpoint(path) -> tuple:
    """(model, document without the parameter payload)."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a checkpoint ({exc.msg})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format")
    model = CDKFormer(ModelConfig.from_dict(doc["model_config"]))
    named = dict(model.named_parameters())
    seen = set()
    with torch.no_grad():
        for rec in doc["params"]:
            name = rec["name"]
            if name not in named or name in seen:
                raise ValueError(f"{path}: unexpected or duplicate parameter {name!r}")
            arr = np.frombuffer(base64.b64decode(rec["data"]), dtype="<f8").reshape(rec["shape"])
            if tuple(arr.shape) != tuple(named[name].shape):
                raise ValueError(f"{path}: shape mismatch for {name!r}")
            named[name].copy_(torch.from_numpy(arr.copy()).to(DTYPE))
            seen.add(name)
    missing = set(named) - seen
    if missing:
        raise ValueError(f"{path}: missing parameters {sorted(missing)[:3]}")
    meta = {k: v for k, v in doc.items() if k != "params"}
    model.eval()
    return model, meta
