"""Multi-source condition: structure masks + scalar context, fused with the time embedding.

Structure channels follow a frozen 8-slot layout: three target slots filled
by descending prescription, then five OARs. Structures known to the
constraint table but without a slot (e.g. parotids) still drive the
constraint loss; they are simply not rasterized into the condition.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .constraints import default_constraints, known_structures
from .denoiser import attention
from .volumes import SITES, TECHNIQUES

PTV_SLOTS = 3
OAR_CHANNELS = ("Total Lung-GTV", "SpinalCord", "Esophagus", "Heart", "BrainStem")
STRUCTURE_LAYOUT = tuple(f"PTV[{i}]" for i in range(PTV_SLOTS)) + OAR_CHANNELS
CONTEXT_WIDTH = len(TECHNIQUES) + len(SITES) + 1
PRESCRIPTION_SCALE = 100.0  # Gy


def structure_tensor(structures, known=None):
    """(8, D, H, W) float32 stack in STRUCTURE_LAYOUT order; absent organs are zero."""
    if known is None:
        known = known_structures(default_constraints())
    ptvs = structures.ptvs()
    if len(ptvs) > PTV_SLOTS:
        raise ValueError(f"at most {PTV_SLOTS} targets fit the layout, got {len(ptvs)}")
    shape = ptvs[0].mask.shape
    out = np.zeros((len(STRUCTURE_LAYOUT),) + shape, dtype=np.float32)
    for i, s in enumerate(ptvs):
        out[i] = s.mask
    for s in structures.oars():
        if s.name not in known and s.name not in OAR_CHANNELS:
            raise ValueError(f"unknown structure name {s.name!r}")
        if s.mask.shape != shape:
            raise ValueError(f"mask {s.name!r} grid {s.mask.shape} != target grid {shape}")
        if s.name in OAR_CHANNELS:
            out[PTV_SLOTS + OAR_CHANNELS.index(s.name)] = s.mask
    return out


def context_vector(technique, site, prescription):
    """technique one-hot (2) + site one-hot (2) + prescription / 100 Gy."""
    v = np.zeros(CONTEXT_WIDTH, dtype=np.float32)
    v[TECHNIQUES.index(technique)] = 1.0
    v[len(TECHNIQUES) + SITES.index(site)] = 1.0
    v[-1] = prescription / PRESCRIPTION_SCALE
    return v


def case_condition_inputs(case, known=None):
    return structure_tensor(case.structures, known), context_vector(case.technique, case.site, case.prescription)


@dataclass
class ConditionConfig:
    projector_channels: tuple = (16, 32, 64, 64)
    context_width: int = 8
    fused_width: int = 64
    heads: int = 4
    time_tokens: int = 4
    temb_width: int = 256

    def __post_init__(self):
        self.projector_channels = tuple(int(c) for c in self.projector_channels)
        if len(self.projector_channels) != 4:
            raise ValueError("the mask projector needs four stride-2 stages (16x)")
        if self.fused_width % self.heads:
            raise ValueError(f"{self.heads} heads do not divide fused width {self.fused_width}")

    @property
    def condition_width(self):
        return self.projector_channels[-1] + self.context_width

    @classmethod
    def desk(cls, **kw):
        kw.setdefault("projector_channels", (8, 16, 32, 32))
        kw.setdefault("fused_width", 32)
        return cls(**kw)

    def to_dict(self):
        return asdict(self)


class ConditionBuilder(nn.Module):
    """Strided 4x4x4 projector (16x reduction) plus a broadcast context embedding."""

    def __init__(self, config=None):
        super().__init__()
        self.config = cfg = config or ConditionConfig()
        layers = []
        prev = len(STRUCTURE_LAYOUT)
        for ch in cfg.projector_channels:
            layers += [nn.Conv3d(prev, ch, 4, 2, 1), nn.SiLU()]
            prev = ch
        self.projector = nn.Sequential(*layers)
        self.context = nn.Linear(CONTEXT_WIDTH, cfg.context_width)
        for m in self.modules():
            if isinstance(m, (nn.Conv3d, nn.Linear)):
                nn.init.zeros_(m.bias)

    def structural(self, masks):
        if masks.dim() != 5 or masks.shape[1] != len(STRUCTURE_LAYOUT):
            raise ValueError(f"expected (B, {len(STRUCTURE_LAYOUT)}, D, H, W) masks, got {tuple(masks.shape)}")
        if any(n % 16 for n in masks.shape[2:]):
            raise ValueError(f"mask grid {tuple(masks.shape[2:])} is not divisible by 16")
        return self.projector(masks)

    def forward(self, masks, context):
        feats = self.structural(masks)
        ctx = self.context(context)[:, :, None, None, None].expand(-1, -1, *feats.shape[2:])
        return torch.cat([feats, ctx], dim=1)


class ConditionFusion(nn.Module):
    """1x1x1 compression, then one transformer block whose cross-attention takes
    queries from the structural grid and keys/values from time + context tokens."""

    def __init__(self, config=None):
        super().__init__()
        self.config = cfg = config or ConditionConfig()
        d = cfg.fused_width
        self.compress = nn.Conv3d(cfg.condition_width, d, 1)
        self.time_tokens = nn.Linear(cfg.temb_width, cfg.time_tokens * d)
        self.context_token = nn.Linear(CONTEXT_WIDTH, d)
        self.norm_q = nn.LayerNorm(d)
        self.norm_kv = nn.LayerNorm(d)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.norm_mlp = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.SiLU(), nn.Linear(2 * d, d))
        self.keep_weights = False
        self.last_weights = None

    def forward(self, cond, temb, context):
        cfg = self.config
        if cond.shape[1] != cfg.condition_width:
            raise ValueError(f"condition width {cond.shape[1]} != {cfg.condition_width}")
        if temb.shape[-1] != cfg.temb_width:
            raise ValueError(f"time embedding width {temb.shape[-1]} != {cfg.temb_width}")
        h = self.compress(cond)
        B, d, *spatial = h.shape
        x = h.reshape(B, d, -1).transpose(1, 2)
        kv = torch.cat(
            [self.time_tokens(temb).reshape(B, cfg.time_tokens, d), self.context_token(context)[:, None, :]], dim=1
        )
        kv = self.norm_kv(kv)
        attn, w = attention(self.q(self.norm_q(x)), self.k(kv), self.v(kv), cfg.heads)
        if self.keep_weights:
            self.last_weights = w.detach()
        x = x + self.out(attn)
        x = x + self.mlp(self.norm_mlp(x))
        return x.transpose(1, 2).reshape(B, d, *spatial)


def build_condition(builder, structures, technique, site, prescription, known=None):
    """Single-case convenience wrapper returning a (1, C, d, h, w) tensor."""
    masks = torch.from_numpy(structure_tensor(structures, known))[None]
    ctx = torch.from_numpy(context_vector(technique, site, prescription))[None]
    return builder(masks, ctx)


def fuse_condition(fusion, cond, temb, context):
    return fusion(cond, temb, context)
