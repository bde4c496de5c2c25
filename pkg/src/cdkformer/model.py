"""CDKFormer: scene encoder + dual-query decoder, configured by ModelConfig."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from typing import Iterable

import torch
import torch.nn as nn

from .decoder import DEFAULT_ORDER, DecoderOutput, DualQueryDecoder
from .encoder import SceneEncoder
from .numerics import NO_DROPOUT, DropoutCtx, RngStream, init_parameters
from .scene import HORIZONS

ABLATIONS = ("no-ind", "no-grp", "no-mode-q", "no-reg-q", "no-tail-q", "stream-order=", "layers=")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    heads: int = 4
    hidden: int = 64
    layers: int = 2
    modes: int = 6
    experts: int = 8
    bands: int = 8
    dropout: float = 0.1
    t_obs: int = HORIZONS["desk"][0]
    t_fut: int = HORIZONS["desk"][1]
    step_scale: float = 1.0
    init_std: float = 1.0
    use_individual: bool = True
    use_group: bool = True
    use_mode_query: bool = True
    use_regular_query: bool = True
    use_tail_query: bool = True
    stream_order: tuple = DEFAULT_ORDER

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if not 1 <= self.layers <= 8:
            raise ValueError("layers must lie in 1..8")
        if self.modes < 1 or self.experts < 1 or self.bands < 1:
            raise ValueError("modes, experts and bands must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not (self.use_regular_query or self.use_tail_query):
            raise ValueError("cannot disable both future queries")
        object.__setattr__(self, "stream_order", tuple(self.stream_order))
        if sorted(self.stream_order) != sorted(DEFAULT_ORDER):
            raise ValueError(f"stream order must be a permutation of {','.join(DEFAULT_ORDER)}")

    @classmethod
    def for_horizon(cls, name: str, **kw) -> "ModelConfig":
        if name not in HORIZONS:
            raise ValueError(f"unknown horizon {name!r}")
        t_obs, t_fut, _ = HORIZONS[name]
        return cls(t_obs=t_obs, t_fut=t_fut, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stream_order"] = list(self.stream_order)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        d = dict(d)
        if "stream_order" in d:
            d["stream_order"] = tuple(d["stream_order"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def apply_ablations(cfg: ModelConfig, flags: Iterable[str]) -> ModelConfig:
    """Apply --ablate flags: no-ind, no-grp, no-mode-q, no-reg-q, no-tail-q, stream-order=a,b,c, layers=N."""
    changes = {}
    for flag in flags:
        for part in str(flag).split("+"):
            part = part.strip()
            if part == "no-ind":
                changes["use_individual"] = False
            elif part == "no-grp":
                changes["use_group"] = False
            elif part == "no-mode-q":
                changes["use_mode_query"] = False
            elif part == "no-reg-q":
                changes["use_regular_query"] = False
            elif part == "no-tail-q":
                changes["use_tail_query"] = False
            elif part.startswith("stream-order="):
                order = tuple(x.strip() for x in part.split("=", 1)[1].replace("-", ",").split(",") if x.strip())
                changes["stream_order"] = order
            elif part.startswith("layers="):
                try:
                    changes["layers"] = int(part.split("=", 1)[1])
                except ValueError as exc:
                    raise ValueError(f"bad layer count in {part!r}") from exc
            else:
                raise ValueError(f"unknown ablation {part!r}; expected one of {', '.join(ABLATIONS)}")
    return replace(cfg, **changes)


class CDKFormer(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = SceneEncoder(cfg.d, cfg.heads, cfg.hidden, cfg.layers, cfg.bands, cfg.t_obs,
                                    cfg.use_individual, cfg.use_group)
        self.decoder = DualQueryDecoder(cfg.d, cfg.heads, cfg.hidden, cfg.experts, cfg.layers, cfg.modes, cfg.t_fut,
                                        cfg.stream_order, cfg.step_scale, cfg.use_mode_query,
                                        cfg.use_regular_query, cfg.use_tail_query)
        init_parameters(self, rng or RngStream(0), cfg.init_std)
        # start the heads near zero output so initial trajectories sit near the origin
        with torch.no_grad():
            for layer in self.decoder.output_layers():
                layer.w.mul_(0.1)

    def forward(self, batch, drop: DropoutCtx = NO_DROPOUT) -> DecoderOutput:
        return self.decoder(self.encoder(batch, drop), drop)
