"""3D U-Net noise predictor with sinusoidal time embedding and multi-head attention."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .vae import StableSiLU


@dataclass
class DenoiserConfig:
    channels: tuple = (64, 128, 256, 512)
    heads: int = 4
    temb_width: int = 256
    latent_channels: int = 32
    cond_width: int = 64
    groups: int = 8

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 4:
            raise ValueError("the U-Net needs four down stages")
        for c in self.channels[-1:]:
            if c % self.heads:
                raise ValueError(f"{self.heads} heads do not divide attention width {c}")

    @classmethod
    def desk(cls, **kw):
        kw.setdefault("channels", (16, 32, 64, 128))
        kw.setdefault("cond_width", 32)
        return cls(**kw)

    def to_dict(self):
        return asdict(self)


def sinusoidal_embedding(t, width):
    """sin/cos of t / 10000^(2k/width), sines first."""
    if width % 2:
        raise ValueError(f"embedding width must be even, got {width}")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if bool((t < 0).any()):
        raise ValueError("timesteps must be >= 0")
    k = torch.arange(width // 2, dtype=torch.float64)
    args = t[:, None] / torch.pow(10000.0, 2.0 * k / width)[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimeEmbedding(nn.Module):
    def __init__(self, width=256):
        super().__init__()
        self.width = width
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t):
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_embedding(t, self.width).to(dtype))


def attention(q, k, v, heads):
    """Scaled dot-product attention over (B, N, C) sequences; returns (out, weights)."""
    B, Nq, C = q.shape
    Nk = k.shape[1]
    if C % heads:
        raise ValueError(f"{heads} heads do not divide width {C}")
    d = C // heads
    q = q.reshape(B, Nq, heads, d).transpose(1, 2)
    k = k.reshape(B, Nk, heads, d).transpose(1, 2)
    v = v.reshape(B, Nk, heads, d).transpose(1, 2)
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
    out = (w @ v).transpose(1, 2).reshape(B, Nq, C)
    return out, w


class MultiHeadAttention3D(nn.Module):
    """Self-attention over the flattened voxels of a feature grid, residual."""

    def __init__(self, channels, heads=4, groups=8):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{heads} heads do not divide {channels} channels")
        self.heads = heads
        self.norm = nn.GroupNorm(min(groups, channels), channels)
        self.qkv = nn.Conv3d(channels, 3 * channels, 1)
        self.proj = nn.Conv3d(channels, channels, 1)
        self.keep_weights = False
        self.last_weights = None

    def forward(self, x):
        B, C, *spatial = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(B, 3, C, -1).transpose(-1, -2).unbind(1)
        out, w = attention(q, k, v, self.heads)
        if self.keep_weights:
            self.last_weights = w.detach()
        return x + self.proj(out.transpose(1, 2).reshape(B, C, *spatial))


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_width, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_width, 2 * cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.act = StableSiLU()
        self.shortcut = nn.Identity() if cin == cout else nn.Conv3d(cin, cout, 1)

    def forward(self, x, temb):
        h = self.conv1(self.act(self.norm1(x)))
        scale, shift = self.temb(temb)[:, :, None, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(self.act(h))
        return self.shortcut(x) + h


class UNet3D(nn.Module):
    """Four stride-2 down stages, bottleneck, four mirrored up stages.

    Stride-2 3x3x3 convolutions with padding 1 round odd sizes up (9 -> 5),
    and each up stage crops back to its skip, so any latent grid works.
    Condition features are pooled to every resolution and added through a
    1x1x1 projection; attention runs at the deepest stage and bottleneck.
    """

    def __init__(self, config=None):
        super().__init__()
        self.config = cfg = config or DenoiserConfig()
        c, g, tw = cfg.channels, cfg.groups, cfg.temb_width
        self.attn_levels = {3}
        self.in_conv = nn.Conv3d(cfg.latent_channels, c[0], 3, padding=1)
        self.down_res = nn.ModuleList()
        self.down_cond = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.down_sample = nn.ModuleList()
        prev = c[0]
        for i, ch in enumerate(c):
            self.down_res.append(ResBlock(prev, ch, tw, g))
            self.down_cond.append(nn.Conv3d(cfg.cond_width, ch, 1))
            if i in self.attn_levels:
                self.down_attn[str(i)] = MultiHeadAttention3D(ch, cfg.heads, g)
            self.down_sample.append(nn.Conv3d(ch, ch, 3, stride=2, padding=1))
            prev = ch
        self.mid1 = ResBlock(c[3], c[3], tw, g)
        self.mid_attn = MultiHeadAttention3D(c[3], cfg.heads, g)
        self.mid2 = ResBlock(c[3], c[3], tw, g)
        self.up_conv = nn.ModuleList()
        self.up_res = nn.ModuleList()
        self.up_cond = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        prev = c[3]
        for i in reversed(range(4)):
            self.up_conv.append(nn.Conv3d(prev, c[i], 3, padding=1))
            self.up_res.append(ResBlock(2 * c[i], c[i], tw, g))
            self.up_cond.append(nn.Conv3d(cfg.cond_width, c[i], 1))
            if i in self.attn_levels:
                self.up_attn[str(i)] = MultiHeadAttention3D(c[i], cfg.heads, g)
            prev = c[i]
        self.out_norm = nn.GroupNorm(min(g, c[0]), c[0])
        self.out_act = StableSiLU()
        self.out_conv = nn.Conv3d(c[0], cfg.latent_channels, 3, padding=1)

    def attention_modules(self):
        return [m for m in self.modules() if isinstance(m, MultiHeadAttention3D)]

    def forward(self, z_t, temb, cond):
        if z_t.dim() != 5 or z_t.shape[1] != self.config.latent_channels:
            raise ValueError(f"expected (B, {self.config.latent_channels}, d, h, w) latents, got {tuple(z_t.shape)}")
        if cond.shape[0] != z_t.shape[0] or tuple(cond.shape[2:]) != tuple(z_t.shape[2:]):
            raise ValueError(f"condition grid {tuple(cond.shape)} not aligned with latent {tuple(z_t.shape)}")
        if cond.shape[1] != self.config.cond_width:
            raise ValueError(f"condition width {cond.shape[1]} != {self.config.cond_width}")

        def inject(proj, h):
            return h + proj(F.adaptive_avg_pool3d(cond, h.shape[2:]))

        h = self.in_conv(z_t)
        skips = []
        for i in range(4):
            h = inject(self.down_cond[i], self.down_res[i](h, temb))
            if str(i) in self.down_attn:
                h = self.down_attn[str(i)](h)
            skips.append(h)
            h = self.down_sample[i](h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb)), temb)
        for j, i in enumerate(reversed(range(4))):
            skip = skips[i]
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.up_conv[j](h[:, :, : skip.shape[2], : skip.shape[3], : skip.shape[4]])
            h = inject(self.up_cond[j], self.up_res[j](torch.cat([h, skip], dim=1), temb))
            if str(i) in self.up_attn:
                h = self.up_attn[str(i)](h)
        return self.out_conv(self.out_act(self.out_norm(h)))


def predict_noise(unet, z_t, temb, cond):
    return unet(z_t, temb, cond)
