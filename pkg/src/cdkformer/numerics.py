"""Dense float64 math on torch tensors, reverse-mode via autograd.

Every layer in the model is built from the functions here so that the
same code path is exercised by the finite-difference checks in the tests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

DTYPE = torch.float64

LOG_CLAMP = 1e-12
LN_EPS = 1e-5
# exp(MASK_FILL - max) underflows to exactly 0.0 in float64, so rows with at
# least one valid key match an -inf mask bit for bit while fully masked rows
# stay finite.
MASK_FILL = -1e30


class NonFiniteError(ValueError):
    pass


def check_finite(x: torch.Tensor, what: str = "input") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


@dataclass
class RngStream:
    """Counter-based random stream (Philox), reproducible across platforms."""

    seed: int
    counter: int = 0

    def numpy(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=self.seed & (2**64 - 1), counter=self.counter)
        return np.random.Generator(bitgen)

    def substream(self, *keys: int) -> "RngStream":
        ss = np.random.SeedSequence([self.seed & (2**63 - 1), self.counter, *keys])
        return RngStream(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def advance(self, n: int = 1) -> "RngStream":
        return RngStream(self.seed, self.counter + n)

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self.substream(0x7047).seed & (2**63 - 1)))
        return g


def fourier_embed(x: torch.Tensor, bands: int = 8) -> torch.Tensor:
    """sin/cos features at frequencies 2^b * pi, b < bands, per input feature.

    Output layout per feature is [sin_0..sin_{B-1}, cos_0..cos_{B-1}].
    """
    if bands < 1:
        raise ValueError("bands must be >= 1")
    check_finite(x, "fourier_embed input")
    freqs = (2.0 ** torch.arange(bands, dtype=x.dtype)) * math.pi
    ang = x.unsqueeze(-1) * freqs  # [..., f, B]
    out = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    return out.reshape(*x.shape[:-1], 2 * bands * x.shape[-1])


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """exp(x - max) / sum(exp(x - max)) along ``axis`` (torch's fused kernel subtracts the max)."""
    check_finite(x, "softmax input")
    return torch.softmax(x, dim=axis)


def _masked_softmax(scores: torch.Tensor, key_mask: Optional[torch.Tensor]) -> torch.Tensor:
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask, MASK_FILL)
    return torch.softmax(scores, dim=-1)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor,
               eps: float = LN_EPS) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def linear(x: torch.Tensor, w: torch.Tensor, b: Optional[torch.Tensor]) -> torch.Tensor:
    y = x @ w
    return y if b is None else y + b


def multi_head_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int,
                         params, key_mask: Optional[torch.Tensor] = None,
                         return_weights: bool = False):
    """softmax(Q_h K_h^T / sqrt(d/heads)) V_h per head, concatenated, projected.

    q: [..., Lq, d], k/v: [..., Lk, d]; key_mask: [..., Lk] bool (True = valid).
    ``params`` exposes wq, bq, wk, bk, wv, bv, wo, bo with weights laid out
    as [d_in, d_out].
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"d={d} not divisible by heads={heads}")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"shape mismatch q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    dh = d // heads
    lead = q.shape[:-2]
    lq, lk = q.shape[-2], k.shape[-2]

    def split(x, n):
        return x.reshape(*x.shape[:-2], n, heads, dh).transpose(-3, -2)

    qh = split(linear(q, params.wq, params.bq), lq)
    kh = split(linear(k, params.wk, params.bk), lk)
    vh = split(linear(v, params.wv, params.bv), lk)
    scores = (qh * (1.0 / math.sqrt(dh))) @ kh.transpose(-1, -2)
    mask = None if key_mask is None else key_mask.unsqueeze(-2).unsqueeze(-2)
    attn = _masked_softmax(scores, mask)
    out = (attn @ vh).transpose(-3, -2).reshape(*lead, lq, d)
    out = linear(out, params.wo, params.bo)
    return (out, attn) if return_weights else out


def smooth_l1(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-timestep smooth L1 summed over coordinates, averaged over T.

    Accepts leading batch dimensions: [..., T, 2] -> [...].
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    e = (pred - gt).abs()
    per = torch.where(e < 1.0, 0.5 * e * e, e - 0.5)
    return per.sum(dim=-1).mean(dim=-1)


def cross_entropy(pred_probs: torch.Tensor, target: torch.Tensor, validate: bool = True) -> torch.Tensor:
    """-sum_k p_k log(p_hat_k) with the log clamped at log(1e-12). Batched over leading dims."""
    if validate:
        tot = pred_probs.detach().sum(dim=-1)
        if bool(((tot - 1).abs() > 1e-6).any()) or bool((pred_probs.detach() < 0).any()):
            raise ValueError("pred_probs is not a probability vector")
        tt = target.detach().sum(dim=-1)
        if bool(((tt - 1).abs() > 1e-6).any()) or bool((target.detach() < 0).any()):
            raise ValueError("target is not a probability vector")
    return -(target * torch.log(pred_probs.clamp_min(LOG_CLAMP))).sum(dim=-1)


def grad_check(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], step: float = 1e-5,
               n_coords: Optional[int] = None, rng: Optional[RngStream] = None) -> float:
    """Max relative error between autograd and central differences.

    ``f`` is re-evaluated with each parameter perturbed in place; it must be
    deterministic. Relative error is |a - n| / max(1, |a|).
    """
    params = list(params)
    for p in params:
        p.grad = None
    with torch.enable_grad():
        loss = f()
        if not bool(torch.isfinite(loss)):
            raise NonFiniteError("non-finite loss in grad_check")
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    if n_coords is not None and n_coords < len(coords):
        gen = (rng or RngStream(0)).numpy()
        pick = gen.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[c] for c in sorted(pick)]

    worst = 0.0
    with torch.no_grad():
        for i, j in coords:
            flat = params[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + step
            up = f().item()
            flat[j] = orig - step
            down = f().item()
            flat[j] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteError("non-finite loss in grad_check")
            num = (up - down) / (2 * step)
            ana = grads[i].reshape(-1)[j].item()
            worst = max(worst, abs(ana - num) / max(1.0, abs(ana)))
    return worst


# ---------------------------------------------------------------------------
# Parameterized layers


def zeros_param(*shape) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape, dtype=DTYPE))


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.w = zeros_param(d_in, d_out)
        self.b = zeros_param(d_out) if bias else None

    def forward(self, x):
        return linear(x, self.w, self.b)


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.bias = zeros_param(d)

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias)


class MLP(nn.Module):
    """Linear -> ReLU -> ... -> Linear; no activation after the last layer."""

    def __init__(self, dims: Sequence[int]):
        super().__init__()
        self.layers = nn.ModuleList(Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        for name in ("q", "k", "v", "o"):
            setattr(self, "w" + name, zeros_param(d, d))
            setattr(self, "b" + name, zeros_param(d))

    def forward(self, q, k, v, key_mask=None, return_weights=False):
        return multi_head_attention(q, k, v, self.heads, self, key_mask, return_weights)


@dataclass
class DropoutCtx:
    """Dropout switch plus its random source; ``rate == 0`` or ``gen is None`` is identity."""

    rate: float = 0.0
    gen: Optional[torch.Generator] = field(default=None, repr=False)

    @property
    def active(self) -> bool:
        return self.rate > 0 and self.gen is not None

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if not self.active:
            return x
        keep = torch.rand(x.shape, generator=self.gen, dtype=x.dtype) >= self.rate
        return x * keep / (1.0 - self.rate)


NO_DROPOUT = DropoutCtx()


class EncoderLayer(nn.Module):
    """Pre-norm Transformer encoder layer: self-attention then MLP, both residual."""

    def __init__(self, d: int, heads: int, hidden: int):
        super().__init__()
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP([d, hidden, d])

    def forward(self, x, key_mask=None, drop: DropoutCtx = NO_DROPOUT):
        h = self.norm1(x)
        x = x + drop(self.attn(h, h, h, key_mask))
        return x + drop(self.mlp(self.norm2(x)))


def init_parameters(module: nn.Module, rng: RngStream, std: float = 0.02) -> None:
    """Deterministic init independent of torch's global RNG.

    Weight matrices get scaled normal draws (fan-in), biases zero, norm gains
    one; everything else (queries, embeddings) gets N(0, std).
    """
    gen = rng.numpy()
    with torch.no_grad():
        for name, p in sorted(module.named_parameters()):
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gain":
                p.fill_(1.0)
            elif leaf.startswith("b"):
                p.zero_()
            elif leaf.startswith("w") and p.dim() >= 2:
                fan_in = p.shape[-2]
                p.copy_(torch.from_numpy(gen.standard_normal(tuple(p.shape)) / math.sqrt(fan_in)))
            else:
                p.copy_(torch.from_numpy(gen.standard_normal(tuple(p.shape)) * std))
