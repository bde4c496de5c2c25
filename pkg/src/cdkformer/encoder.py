"""Scene encoder: agent motion, map polylines, scene-context fusion, deviation fusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .features import POS_SCALE
from .numerics import MLP, NO_DROPOUT, DropoutCtx, EncoderLayer, fourier_embed, zeros_param


@dataclass
class EncodedScene:
    ctx: torch.Tensor  # [B, N_a + N_m, d]
    ctx_mask: torch.Tensor  # [B, N_a + N_m] bool
    dev: torch.Tensor  # [B, T_o, d]
    dev_mask: torch.Tensor  # [B, T_o] bool
    agents: torch.Tensor  # [B, N_a, d] last-step agent features
    target_seq: torch.Tensor  # [B, T_o, d]
    n_agents: int
    agent_last_pos: torch.Tensor  # [B, N_a, 2] meters, target frame


class AgentEncoder(nn.Module):
    """Fourier embedding + MLP per step, then temporal self-attention per agent."""

    def __init__(self, d: int, heads: int, hidden: int, layers: int, bands: int, t_obs: int, d_in: int = 6):
        super().__init__()
        self.bands = bands
        self.embed = MLP([2 * bands * d_in, hidden, d])
        self.time_embed = zeros_param(t_obs, d)
        self.layers = nn.ModuleList(EncoderLayer(d, heads, hidden) for _ in range(layers))

    def forward(self, X: torch.Tensor, step_mask: torch.Tensor, drop: DropoutCtx = NO_DROPOUT):
        """X: [..., N_a, T_o, 6] -> (C_a [..., N_a, d], sequences [..., N_a, T_o, d])."""
        if X.shape[-1] * 2 * self.bands != self.embed.layers[0].w.shape[0]:
            raise ValueError(f"agent features must have {self.embed.layers[0].w.shape[0] // (2 * self.bands)} channels")
        if X.shape[-2] != self.time_embed.shape[0]:
            raise ValueError(f"expected T_o={self.time_embed.shape[0]}, got {X.shape[-2]}")
        lead = X.shape[:-2]
        h = self.embed(fourier_embed(X, self.bands)) + self.time_embed
        h = h.reshape(-1, *h.shape[-2:])
        m = step_mask.reshape(-1, step_mask.shape[-1])
        for layer in self.layers:
            h = layer(h, m, drop)
        h = h.reshape(*lead, *h.shape[-2:])
        return h[..., -1, :], h


class MapEncoder(nn.Module):
    """PointNet-style polyline encoder: shared point MLP, max-pool, add back, repeat, pool."""

    def __init__(self, d: int, hidden: int, bands: int, rounds: int = 2, d_in: int = 4):
        super().__init__()
        self.bands = bands
        dims = [2 * bands * d_in] + [d] * (rounds - 1)
        self.rounds = nn.ModuleList(MLP([a, hidden, d]) for a in dims)

    def forward(self, I: torch.Tensor, valid: Optional[torch.Tensor] = None):
        """I: [..., N_m, l_m, 4] -> [..., N_m, d]; invalid (padding) polylines give zeros."""
        h = fourier_embed(I, self.bands)
        for r, mlp in enumerate(self.rounds):
            h = mlp(h)
            if r < len(self.rounds) - 1:
                h = h + h.amax(dim=-2, keepdim=True)
        out = h.amax(dim=-2)
        if valid is not None:
            out = out * valid.unsqueeze(-1).to(out.dtype)
        return out


class SceneFusion(nn.Module):
    """Agent and map tokens plus spatial embeddings of their centers, jointly self-attended."""

    def __init__(self, d: int, heads: int, hidden: int, layers: int, bands: int):
        super().__init__()
        self.bands = bands
        self.spatial = MLP([4 * bands, hidden, d])
        self.layers = nn.ModuleList(EncoderLayer(d, heads, hidden) for _ in range(layers))

    def forward(self, C_a, C_m, centers, mask=None, drop: DropoutCtx = NO_DROPOUT):
        tokens = torch.cat([C_a, C_m], dim=-2)
        if centers.shape[:-1] != tokens.shape[:-1] or centers.shape[-1] != 2:
            raise ValueError(f"centers {tuple(centers.shape)} do not match tokens {tuple(tokens.shape)}")
        h = tokens + self.spatial(fourier_embed(centers, self.bands))
        for layer in self.layers:
            h = layer(h, mask, drop)
        return h


class DeviationFusion(nn.Module):
    """Individual and group descriptors projected and added, fused with the target sequence."""

    def __init__(self, d: int, heads: int, hidden: int, use_individual: bool = True, use_group: bool = True):
        super().__init__()
        self.use_individual = use_individual
        self.use_group = use_group
        self.individual = MLP([6, hidden, d])
        self.group = MLP([2, hidden, d])
        self.fuser = MLP([2 * d, hidden, d])
        self.layer = EncoderLayer(d, heads, hidden)

    def forward(self, individual, group, target_seq, mask=None, drop: DropoutCtx = NO_DROPOUT):
        if individual.shape[-2] != target_seq.shape[-2] or group.shape[-2] != target_seq.shape[-2]:
            raise ValueError("deviation streams and target sequence must share T_o")
        x_dev = torch.zeros_like(target_seq)
        if self.use_individual:
            x_dev = x_dev + self.individual(individual)
        if self.use_group:
            x_dev = x_dev + self.group(group)
        h = self.fuser(torch.cat([x_dev, target_seq], dim=-1))
        return self.layer(h, mask, drop)


class SceneEncoder(nn.Module):
    def __init__(self, d: int, heads: int, hidden: int, layers: int, bands: int, t_obs: int,
                 use_individual: bool = True, use_group: bool = True):
        super().__init__()
        self.agent = AgentEncoder(d, heads, hidden, layers, bands, t_obs)
        self.map = MapEncoder(d, hidden, bands)
        self.fusion = SceneFusion(d, heads, hidden, layers, bands)
        self.deviation = DeviationFusion(d, heads, hidden, use_individual, use_group)

    def forward(self, batch, drop: DropoutCtx = NO_DROPOUT) -> EncodedScene:
        # padded agents still run through the temporal encoder; give them one
        # valid step so their (discarded) rows stay well defined
        step_mask = batch.agent_mask | ~batch.agent_valid.unsqueeze(-1)
        C_a, seqs = self.agent(batch.agents, step_mask, drop)
        C_m = self.map(batch.polylines, batch.poly_valid)
        ctx_mask = batch.context_mask
        C_ctx = self.fusion(C_a, C_m, batch.centers, ctx_mask, drop)
        target_seq = seqs[:, 0]
        dev_mask = batch.agent_mask[:, 0]
        C_dev = self.deviation(batch.individual, batch.group, target_seq, dev_mask, drop)
        n_a = batch.agents.shape[1]
        last_pos = batch.centers[:, :n_a] * POS_SCALE
        return EncodedScene(C_ctx, ctx_mask, C_dev, dev_mask, C_a, target_seq, n_a, last_pos)

