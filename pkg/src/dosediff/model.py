"""Noise predictor assembled from time embedding, condition builder/fusion and U-Net."""
from __future__ import annotations

import torch
import torch.nn as nn

from .conditioning import ConditionBuilder, ConditionConfig, ConditionFusion
from .denoiser import DenoiserConfig, TimeEmbedding, UNet3D


class DoseDenoiser(nn.Module):
    def __init__(self, denoiser_config=None, condition_config=None):
        super().__init__()
        dcfg = denoiser_config or DenoiserConfig()
        ccfg = condition_config or ConditionConfig(temb_width=dcfg.temb_width, fused_width=dcfg.cond_width)
        if ccfg.fused_width != dcfg.cond_width or ccfg.temb_width != dcfg.temb_width:
            raise ValueError("condition fusion width / time width must match the U-Net config")
        self.denoiser_config = dcfg
        self.condition_config = ccfg
        self.time_embed = TimeEmbedding(dcfg.temb_width)
        self.builder = ConditionBuilder(ccfg)
        self.fusion = ConditionFusion(ccfg)
        self.unet = UNet3D(dcfg)

    @classmethod
    def desk(cls):
        dcfg = DenoiserConfig.desk()
        return cls(dcfg, ConditionConfig.desk(temb_width=dcfg.temb_width, fused_width=dcfg.cond_width))

    def forward(self, z_t, t, masks, context, cond=None):
        """Noise estimate; ``cond`` may carry a precomputed builder output."""
        if cond is None:
            cond = self.builder(masks, context)
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and z_t.shape[0] > 1:
            t = t.expand(z_t.shape[0])
        temb = self.time_embed(t)
        return self.unet(z_t, temb, self.fusion(cond, temb, context))

    def noise_fn(self, masks, context):
        """Closure for ``diffusion.sample``; the mask projection is computed once."""
        cond = self.builder(masks, context)

        def fn(z_t, t, _cond=None):
            return self(z_t, t, masks, context, cond=cond)

        return fn
