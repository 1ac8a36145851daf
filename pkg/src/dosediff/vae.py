"""LightweightVAE3D: 16x spatial compression into a 32-channel Gaussian latent grid.

The encoder is a chain of four stride-2 4x4x4 convolutions. The first stage
exists twice, once for CT and once for dose, so both modalities share the
rest of the ladder and the latent space; the decoder mirrors this with two
output stages. Decoded CT is a sigmoid remapped onto the normalized CT range
[-2, 2]; decoded dose is a sigmoid scaled onto [0, DOSE_UNIT] normalized
dose units.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

DOSE_UNIT = 0.125  # normalized dose at sigmoid = 1, i.e. 1.25 x the PTV D3 reference
CT_LOW, CT_HIGH = -2.0, 2.0
MODALITIES = ("ct", "dose")


class StableSiLU(nn.Module):
    """x * sigmoid(x) with the sigmoid argument clamped to [-60, 60]."""

    def forward(self, x):
        return x * torch.sigmoid(torch.clamp(x, -60.0, 60.0))


@dataclass
class VAEConfig:
    channels: tuple = (32, 64, 128, 256)
    latent_channels: int = 32
    groups: int = 8
    beta_max: float = 0.001
    warmup_epochs: int = 20

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 4:
            raise ValueError("the channel ladder needs exactly four stages (16x downsampling)")

    def to_dict(self):
        return asdict(self)


class LatentStats(NamedTuple):
    mu: torch.Tensor
    logvar: torch.Tensor


def _norm(c, groups):
    return nn.GroupNorm(min(groups, c), c)


def _down(cin, cout, groups):
    return nn.Sequential(nn.Conv3d(cin, cout, 4, 2, 1), _norm(cout, groups), StableSiLU())


def _up(cin, cout, groups):
    return nn.Sequential(nn.ConvTranspose3d(cin, cout, 4, 2, 1), _norm(cout, groups), StableSiLU())


class LightweightVAE3D(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or VAEConfig()
        c, g, L = config.channels, config.groups, config.latent_channels
        self.inputs = nn.ModuleDict({m: _down(1, c[0], g) for m in MODALITIES})
        self.encoder = nn.Sequential(_down(c[0], c[1], g), _down(c[1], c[2], g), _down(c[2], c[3], g))
        self.mu_head = nn.Conv3d(c[3], L, 1)
        self.logvar_head = nn.Conv3d(c[3], L, 1)
        self.from_latent = nn.Sequential(nn.Conv3d(L, c[3], 1), _norm(c[3], g), StableSiLU())
        self.decoder = nn.Sequential(_up(c[3], c[2], g), _up(c[2], c[1], g), _up(c[1], c[0], g))
        self.outputs = nn.ModuleDict({m: nn.ConvTranspose3d(c[0], 1, 4, 2, 1) for m in MODALITIES})

    def encode(self, x, modality="ct"):
        """(B, 1, D, H, W) -> LatentStats of shape (B, L, D/16, H/16, W/16)."""
        if x.dim() != 5 or x.shape[1] != 1:
            raise ValueError(f"expected a (B, 1, D, H, W) volume, got {tuple(x.shape)}")
        bad = [n for n in x.shape[2:] if n % 16]
        if bad:
            raise ValueError(f"every spatial axis must be divisible by 16, got {tuple(x.shape[2:])}")
        h = self.encoder(self.inputs[modality](x))
        return LatentStats(self.mu_head(h), self.logvar_head(h))

    def decode_unit(self, z, modality="ct"):
        """Sigmoid output in [0, 1] before any range mapping."""
        if z.dim() != 5 or z.shape[1] != self.config.latent_channels:
            raise ValueError(
                f"expected a (B, {self.config.latent_channels}, d, h, w) latent, got {tuple(z.shape)}"
            )
        return torch.sigmoid(self.outputs[modality](self.decoder(self.from_latent(z))))

    def decode(self, z, modality="ct"):
        u = self.decode_unit(z, modality)
        if modality == "ct":
            return u * (CT_HIGH - CT_LOW) + CT_LOW
        return u * DOSE_UNIT

    def forward(self, x, modality="ct", noise=None):
        stats = self.encode(x, modality)
        if noise is None:
            noise = torch.randn_like(stats.mu)
        return self.decode(reparameterize(stats, noise), modality), stats


def latent_shape(spatial, latent_channels=32):
    for n in spatial:
        if n % 16:
            raise ValueError(f"axis {n} not divisible by 16")
    return (latent_channels,) + tuple(n // 16 for n in spatial)


def reparameterize(stats, noise):
    mu, logvar = stats
    if tuple(noise.shape) != tuple(mu.shape):
        raise ValueError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(mu.shape)}")
    return mu + torch.exp(0.5 * logvar) * noise


def kl_divergence(stats):
    """Batch mean of 1/2 sum(exp(logvar) + mu^2 - 1 - logvar)."""
    mu, logvar = stats
    per_elem = torch.exp(logvar) + mu**2 - 1.0 - logvar
    return 0.5 * per_elem.reshape(per_elem.shape[0], -1).sum(dim=1).mean()


def vae_loss(x, recon, stats, beta):
    if tuple(x.shape) != tuple(recon.shape):
        raise ValueError(f"reconstruction shape {tuple(recon.shape)} != input {tuple(x.shape)}")
    l1 = (recon - x).abs().mean()
    kl = kl_divergence(stats)
    return l1 + beta * kl, l1, kl


def anneal_beta(epoch, warmup_epochs=20, beta_max=0.001):
    """Linear warm-up of the KL weight from 0 to ``beta_max``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if warmup_epochs <= 0:
        return beta_max
    return beta_max * min(epoch / warmup_epochs, 1.0)
