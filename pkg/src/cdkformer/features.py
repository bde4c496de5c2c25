"""Model inputs: per-scenario feature arrays in the target frame and padded batches."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .deviation import deviation_bundle
from .numerics import DTYPE
from .scene import Scenario, normalize_frame

# fixed input scales applied before the Fourier embedding
POS_SCALE = 50.0
DISP_SCALE = 2.0
SPEED_SCALE = 20.0
MAP_DISP_SCALE = 10.0
# individual descriptor: 4 angle entries (rad) then 2 speed entries (m/s)
IND_SCALE = np.array([1.0, 1.0, 1.0, 1.0, 5.0, 5.0])
GRP_SCALE = np.array([5.0, 1.0])


@dataclass
class SceneFeatures:
    id: str
    agents: np.ndarray  # [N_a, T_o, 6] target first
    agent_mask: np.ndarray  # [N_a, T_o]
    polylines: np.ndarray  # [N_m, l_m, 4]
    centers: np.ndarray  # [N_a + N_m, 2]
    individual: np.ndarray  # [T_o, 6]
    group: np.ndarray  # [T_o, 2]
    future: Optional[np.ndarray]  # [T_f, 2] target frame
    neighbor_future: np.ndarray  # [N_a, T_f, 2]
    neighbor_future_mask: np.ndarray  # [N_a] rows with a supervised future (target row excluded)
    origin: np.ndarray  # [2] world position of the frame origin
    theta: float  # world rotation of the frame

    @property
    def n_agents(self) -> int:
        return len(self.agents)


def _frame(sc: Scenario):
    tgt = sc.target
    last = tgt.last_valid
    theta = 0.0 if np.abs(tgt.displacements).sum() == 0.0 else float(tgt.headings[last])
    return tgt.positions[last].copy(), theta


def scene_features(sc: Scenario) -> SceneFeatures:
    origin, theta = _frame(sc)
    n = normalize_frame(sc)
    order = [n.target_index] + [i for i, a in enumerate(n.agents) if a.kind != "target"]
    agents = [n.agents[i] for i in order]
    X = np.zeros((len(agents), n.t_obs, 6))
    M = np.zeros((len(agents), n.t_obs), dtype=bool)
    for i, a in enumerate(agents):
        disp = a.displacements
        X[i, :, 0:2] = a.positions / POS_SCALE
        X[i, :, 2:4] = disp / DISP_SCALE
        X[i, :, 4] = np.linalg.norm(disp, axis=1) / DISP_SCALE
        X[i, :, 5] = a.velocities / SPEED_SCALE
        M[i] = a.mask
    l_m = max((len(p.points) for p in n.polylines), default=2)
    I = np.zeros((len(n.polylines), l_m, 4))
    for j, p in enumerate(n.polylines):
        rows = np.hstack([p.points / POS_SCALE, p.displacements / MAP_DISP_SCALE])
        # shorter polylines repeat their last row; max-pooling ignores duplicates
        I[j] = np.vstack([rows, np.repeat(rows[-1:], l_m - len(rows), axis=0)])
    centers = np.vstack([np.array([a.positions[a.last_valid] for a in agents]).reshape(-1, 2),
                         np.array([p.points.mean(axis=0) for p in n.polylines]).reshape(-1, 2)]) / POS_SCALE
    b = deviation_bundle(n)
    nf = np.zeros((len(agents), n.t_fut, 2))
    nfm = np.zeros(len(agents), dtype=bool)
    for i, a in enumerate(agents[1:], 1):
        if a.future is not None:
            nf[i] = a.future
            nfm[i] = True
    return SceneFeatures(
        id=sc.id, agents=X, agent_mask=M, polylines=I, centers=centers,
        individual=b.individual / IND_SCALE, group=b.group / GRP_SCALE,
        future=None if n.future is None else n.future.copy(),
        neighbor_future=nf, neighbor_future_mask=nfm, origin=origin, theta=theta,
    )


def to_world(f: SceneFeatures, xy: np.ndarray) -> np.ndarray:
    """Map target-frame points back into the scenario's world frame."""
    c, s = np.cos(f.theta), np.sin(f.theta)
    x, y = xy[..., 0], xy[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1) + f.origin


@dataclass
class Batch:
    ids: list
    agents: torch.Tensor  # [B, A, T_o, 6]
    agent_mask: torch.Tensor  # [B, A, T_o] bool
    agent_valid: torch.Tensor  # [B, A] bool (padding)
    polylines: torch.Tensor  # [B, P, l_m, 4]
    poly_valid: torch.Tensor  # [B, P] bool
    centers: torch.Tensor  # [B, A + P, 2]
    individual: torch.Tensor  # [B, T_o, 6]
    group: torch.Tensor  # [B, T_o, 2]
    future: Optional[torch.Tensor]  # [B, T_f, 2]
    neighbor_future: torch.Tensor  # [B, A, T_f, 2]
    neighbor_future_mask: torch.Tensor  # [B, A] bool
    weights: torch.Tensor  # [B] smoothed tail weights

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def context_mask(self) -> torch.Tensor:
        return torch.cat([self.agent_valid, self.poly_valid], dim=1)


def collate(feats: Sequence[SceneFeatures], weights: Optional[Sequence[float]] = None) -> Batch:
    if not feats:
        raise ValueError("empty batch")
    B = len(feats)
    T_o = feats[0].agents.shape[1]
    T_f = feats[0].neighbor_future.shape[1]
    A = max(f.n_agents for f in feats)
    P = max(max(len(f.polylines) for f in feats), 1)
    L = max(max((f.polylines.shape[1] for f in feats if len(f.polylines)), default=2), 2)
    X = np.zeros((B, A, T_o, 6))
    M = np.zeros((B, A, T_o), dtype=bool)
    AV = np.zeros((B, A), dtype=bool)
    I = np.zeros((B, P, L, 4))
    PV = np.zeros((B, P), dtype=bool)
    C = np.zeros((B, A + P, 2))
    NF = np.zeros((B, A, T_f, 2))
    NFM = np.zeros((B, A), dtype=bool)
    for b, f in enumerate(feats):
        n, p = f.n_agents, len(f.polylines)
        X[b, :n], M[b, :n], AV[b, :n] = f.agents, f.agent_mask, True
        if p:
            l = f.polylines.shape[1]
            I[b, :p, :l] = f.polylines
            I[b, :p, l:] = f.polylines[:, -1:]  # duplicate last point
            PV[b, :p] = True
        C[b, :n] = f.centers[:n]
        C[b, A:A + p] = f.centers[n:]
        NF[b, :n], NFM[b, :n] = f.neighbor_future, f.neighbor_future_mask
    has_future = all(f.future is not None for f in feats)
    w = np.ones(B) if weights is None else np.asarray(weights, dtype=float)
    t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(DTYPE)  # noqa: E731
    return Batch(
        ids=[f.id for f in feats], agents=t(X), agent_mask=torch.from_numpy(M), agent_valid=torch.from_numpy(AV),
        polylines=t(I), poly_valid=torch.from_numpy(PV), centers=t(C),
        individual=t(np.stack([f.individual for f in feats])), group=t(np.stack([f.group for f in feats])),
        future=t(np.stack([f.future for f in feats])) if has_future else None,
        neighbor_future=t(NF), neighbor_future_mask=torch.from_numpy(NFM), weights=t(w),
    )
