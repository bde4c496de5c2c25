"""Dual-query decoder: MoE multistream blocks, gated future queries, refinement and heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .numerics import (MLP, NO_DROPOUT, DropoutCtx, EncoderLayer, LayerNorm, MultiHeadAttention, linear,
                       softmax, zeros_param)

STREAMS = ("dev", "ctx")
DEFAULT_ORDER = ("dev", "ctx", "self")


class MoE(nn.Module):
    """Dense mixture of K_e two-layer ReLU experts under a softmax gate."""

    def __init__(self, d: int, hidden: int, experts: int):
        super().__init__()
        if experts < 1:
            raise ValueError("need at least one expert")
        self.w1 = zeros_param(experts, d, hidden)
        self.b1 = zeros_param(experts, hidden)
        self.w2 = zeros_param(experts, hidden, d)
        self.b2 = zeros_param(experts, d)
        self.wg = zeros_param(d, experts)
        self.bg = zeros_param(experts)

    def gate(self, q: torch.Tensor) -> torch.Tensor:
        return softmax(linear(q, self.wg, self.bg), axis=-1)

    def experts(self, q: torch.Tensor) -> torch.Tensor:
        """Per-expert outputs [..., K_e, d]."""
        h = torch.relu(torch.einsum("...d,edh->...eh", q, self.w1) + self.b1)
        return torch.einsum("...eh,ehd->...ed", h, self.w2) + self.b2

    def forward(self, q: torch.Tensor, return_gate: bool = False):
        # sum_e g_e (relu(q W1_e + b1_e) W2_e + b2_e) as two dense matmuls
        E, d, H = self.w1.shape
        g = self.gate(q)
        h = torch.relu(q @ self.w1.permute(1, 0, 2).reshape(d, E * H) + self.b1.reshape(E * H))
        h = (h.reshape(*q.shape[:-1], E, H) * g.unsqueeze(-1)).reshape(*q.shape[:-1], E * H)
        out = h @ self.w2.reshape(E * H, d) + g @ self.b2
        return (out, g) if return_gate else out


def parse_order(order: Sequence[str], streams: Sequence[str]) -> tuple:
    """Keep the phases of ``order`` that apply to a block reading ``streams``."""
    order = tuple(order)
    if sorted(order) != sorted(DEFAULT_ORDER):
        raise ValueError(f"stream order must be a permutation of {DEFAULT_ORDER}, got {order}")
    return tuple(p for p in order if p == "self" or p in streams)


class MultistreamBlock(nn.Module):
    """Per stream: pre-norm cross-attention and an MoE feed-forward, each residual;
    then pre-norm self-attention and an MLP, each residual.

    ``order`` may move the self-attention phase before or between streams.
    """

    def __init__(self, d: int, heads: int, hidden: int, experts: int, streams: Sequence[str],
                 order: Sequence[str] = DEFAULT_ORDER):
        super().__init__()
        self.streams = tuple(streams)
        self.order = parse_order(order, self.streams)
        self.cross_norm = nn.ModuleDict({s: LayerNorm(d) for s in self.streams})
        self.cross = nn.ModuleDict({s: MultiHeadAttention(d, heads) for s in self.streams})
        self.moe = nn.ModuleDict({s: MoE(d, hidden, experts) for s in self.streams})
        self.self_norm = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads)
        self.mlp_norm = LayerNorm(d)
        self.mlp = MLP([d, hidden, d])

    def forward(self, q: torch.Tensor, memories: dict, masks: Optional[dict] = None, q_mask=None,
                drop: DropoutCtx = NO_DROPOUT) -> torch.Tensor:
        masks = masks or {}
        for phase in self.order:
            if phase == "self":
                h = self.self_norm(q)
                q = q + drop(self.self_attn(h, h, h, q_mask))
                continue
            mem = memories[phase]
            if mem.shape[-1] != q.shape[-1]:
                raise ValueError(f"stream {phase!r} has dim {mem.shape[-1]}, queries {q.shape[-1]}")
            h = self.cross_norm[phase](q)
            q = q + drop(self.cross[phase](h, mem, mem, masks.get(phase)))
            q = q + drop(self.moe[phase](q))
        return q + drop(self.mlp(self.mlp_norm(q)))


class MultistreamDecoder(nn.Module):
    def __init__(self, layers: int, *args, **kw):
        super().__init__()
        self.blocks = nn.ModuleList(MultistreamBlock(*args, **kw) for _ in range(layers))

    def forward(self, q, memories, masks=None, q_mask=None, drop: DropoutCtx = NO_DROPOUT):
        for blk in self.blocks:
            q = blk(q, memories, masks, q_mask, drop)
        return q


class Router(nn.Module):
    """gamma = sigmoid(MLP([Q_regular || Q_tail])) elementwise."""

    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.mlp = MLP([2 * d, hidden, d])

    def forward(self, q_reg, q_tail):
        return torch.sigmoid(self.mlp(torch.cat([q_reg, q_tail], dim=-1)))


def combine_queries(q_reg: torch.Tensor, q_tail: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    return gamma * q_tail + (1.0 - gamma) * q_reg


def build_scene_query(q_mode: torch.Tensor, q_dual: torch.Tensor) -> torch.Tensor:
    """Q[k, t] = Q_m[k] + Q_dual[t]; leading batch dims broadcast."""
    if q_mode.shape[-1] != q_dual.shape[-1]:
        raise ValueError("mode and future queries must share d")
    return q_mode.unsqueeze(-2) + q_dual.unsqueeze(-3)


@dataclass
class DecoderOutput:
    trajectories: torch.Tensor  # [B, K, T_f, 2]
    probs: torch.Tensor  # [B, K]
    mode_trajectories: Optional[torch.Tensor]  # [B, K, T_f, 2]
    mode_probs: Optional[torch.Tensor]  # [B, K]
    regular_trajectory: Optional[torch.Tensor]  # [B, T_f, 2]
    tail_trajectory: Optional[torch.Tensor]  # [B, T_f, 2]
    group_trajectories: torch.Tensor  # [B, N_a, T_f, 2]
    gamma: Optional[torch.Tensor]  # [B, T_f, d]


class DualQueryDecoder(nn.Module):
    def __init__(self, d: int, heads: int, hidden: int, experts: int, layers: int, modes: int, t_fut: int,
                 order: Sequence[str] = DEFAULT_ORDER, step_scale: float = 1.0, use_mode_query: bool = True,
                 use_regular_query: bool = True, use_tail_query: bool = True):
        super().__init__()
        if not (use_regular_query or use_tail_query):
            raise ValueError("at least one future query is required")
        self.modes, self.t_fut, self.step_scale = modes, t_fut, step_scale
        self.use_mode_query = use_mode_query
        self.use_regular_query = use_regular_query
        self.use_tail_query = use_tail_query
        self.mode_query = zeros_param(modes, d)
        self.regular_query = zeros_param(t_fut, d)
        self.tail_query = zeros_param(t_fut, d)
        args = (d, heads, hidden, experts)
        self.mode_decoder = MultistreamDecoder(layers, *args, STREAMS, order)
        self.regular_decoder = MultistreamDecoder(layers, *args, STREAMS, order)
        self.tail_decoder = MultistreamDecoder(layers, *args, ("dev",), order)
        self.router = Router(d, hidden)
        # refinement: time then modality self-attention, multistream update, dense self-attention
        self.time_attn = EncoderLayer(d, heads, hidden)
        self.mode_attn = EncoderLayer(d, heads, hidden)
        self.refine = MultistreamBlock(*args, STREAMS, order)
        self.dense_attn = EncoderLayer(d, heads, hidden)
        # pre-norm stacks end without a norm; each head reads a normalized query
        self.head_norm = nn.ModuleDict({k: LayerNorm(d) for k in ("scene", "mode", "regular", "tail", "group")})
        self.traj_head = MLP([d, hidden, 2])
        self.score_head = MLP([d, hidden, 1])
        self.mode_traj_head = MLP([d, hidden, t_fut * 2])
        self.mode_score_head = MLP([d, hidden, 1])
        self.regular_head = MLP([d, hidden, 2])
        self.tail_head = MLP([d, hidden, 2])
        self.group_head = MLP([d, hidden, t_fut * 2])

    def integrate(self, steps: torch.Tensor) -> torch.Tensor:
        """Per-step displacement outputs [..., T_f, 2] -> positions relative to the start."""
        return torch.cumsum(steps * self.step_scale, dim=-2)

    def output_layers(self):
        return [m.layers[-1] for m in (self.traj_head, self.score_head, self.mode_traj_head, self.mode_score_head,
                                      self.regular_head, self.tail_head, self.group_head)]

    def decode_queries(self, enc, drop: DropoutCtx = NO_DROPOUT):
        """(Q_m', Q_f_regular', Q_f_tail'), each with a leading batch dim; disabled paths give None."""
        B = enc.ctx.shape[0]
        mem = {"dev": enc.dev, "ctx": enc.ctx}
        masks = {"dev": enc.dev_mask, "ctx": enc.ctx_mask}
        q_m = self.mode_query.expand(B, -1, -1)
        if self.use_mode_query:
            q_m = self.mode_decoder(q_m, mem, masks, drop=drop)
        q_r = q_t = None
        if self.use_regular_query:
            q_r = self.regular_decoder(self.regular_query.expand(B, -1, -1), mem, masks, drop=drop)
        if self.use_tail_query:
            q_t = self.tail_decoder(self.tail_query.expand(B, -1, -1), {"dev": enc.dev}, {"dev": enc.dev_mask},
                                    drop=drop)
        return q_m, q_r, q_t

    def fuse_futures(self, q_r, q_t):
        if q_r is None:
            return q_t, None
        if q_t is None:
            return q_r, None
        gamma = self.router(q_r, q_t)
        return combine_queries(q_r, q_t, gamma), gamma

    def refine_and_predict(self, q: torch.Tensor, enc, drop: DropoutCtx = NO_DROPOUT):
        B, K, T, d = q.shape
        q = self.time_attn(q.reshape(B * K, T, d), drop=drop).reshape(B, K, T, d)
        q = q.transpose(1, 2).reshape(B * T, K, d)
        q = self.mode_attn(q, drop=drop).reshape(B, T, K, d).transpose(1, 2)
        q = q.reshape(B, K * T, d)
        q = self.refine(q, {"dev": enc.dev, "ctx": enc.ctx}, {"dev": enc.dev_mask, "ctx": enc.ctx_mask}, drop=drop)
        q = self.dense_attn(q, drop=drop).reshape(B, K, T, d)
        h = self.head_norm["scene"](q)
        traj = self.integrate(self.traj_head(h))
        probs = softmax(self.score_head(h.mean(dim=2)).squeeze(-1), axis=-1)
        return traj, probs, q

    def forward(self, enc, drop: DropoutCtx = NO_DROPOUT) -> DecoderOutput:
        q_m, q_r, q_t = self.decode_queries(enc, drop)
        q_dual, gamma = self.fuse_futures(q_r, q_t)
        traj, probs, _ = self.refine_and_predict(build_scene_query(q_m, q_dual), enc, drop)
        B = q_m.shape[0]
        mode_traj = mode_probs = None
        if self.use_mode_query:
            h = self.head_norm["mode"](q_m)
            mode_traj = self.integrate(self.mode_traj_head(h).reshape(B, self.modes, self.t_fut, 2))
            mode_probs = softmax(self.mode_score_head(h).squeeze(-1), axis=-1)
        reg = None if q_r is None else self.integrate(self.regular_head(self.head_norm["regular"](q_r)))
        tail = None if q_t is None else self.integrate(self.tail_head(self.head_norm["tail"](q_t)))
        agents_ctx = self.head_norm["group"](enc.ctx[:, :enc.n_agents])
        group = self.integrate(self.group_head(agents_ctx).reshape(B, enc.n_agents, self.t_fut, 2))
        group = group + enc.agent_last_pos.unsqueeze(-2)
        return DecoderOutput(traj, probs, mode_traj, mode_probs, reg, tail, group, gamma)
