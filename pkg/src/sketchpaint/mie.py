"""Masked-image encoder: context features added onto the denoiser's encoder scales."""
from __future__ import annotations

from typing import List, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError
from .unet import NUM_SCALES, Downsample, ResBlock, TimeMLP, UNetConfig

MASK_FACTORS = (8, 16, 32, 64)


def zero_conv(in_ch: int, out_ch: int) -> nn.Conv2d:
    conv = nn.Conv2d(in_ch, out_ch, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


def downsample_mask(m, factors: Sequence[int] = MASK_FACTORS) -> List[torch.Tensor]:
    """Min-pool a binary mask (0 = corrupted) by each factor.

    A coarse cell stays 1 only when every pixel it covers is 1, so any corruption
    inside a cell marks the whole cell corrupted. Accepts (H, W), (B, H, W) or
    (B, 1, H, W); returns (B, 1, h, w) tensors.
    """
    m = torch.as_tensor(np.asarray(m) if not torch.is_tensor(m) else m)
    if m.dim() == 2:
        m = m[None, None]
    elif m.dim() == 3:
        m = m[:, None]
    if not torch.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    big = max(factors)
    if m.shape[-1] % big or m.shape[-2] % big:
        raise ShapeError(f"mask side must be divisible by {big}, got {tuple(m.shape[-2:])}")
    m = m.to(torch.float32) if not m.is_floating_point() else m
    return [-F.max_pool2d(-m, f) for f in factors]


def inject(N: Sequence[torch.Tensor], M: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    if len(N) != len(M):
        raise ShapeError(f"{len(N)} vs {len(M)} scales")
    out = []
    for i, (n, m) in enumerate(zip(N, M)):
        if n.shape != m.shape:
            raise ShapeError(f"scale {i + 1}: {tuple(n.shape)} vs {tuple(m.shape)}")
        out.append(n + m)
    return out


class MaskedImageEncoder(nn.Module):
    """Mirror of the denoiser encoder minus cross-attention.

    The mask level matching each scale is concatenated to the running feature and
    folded back by a 3x3 conv before that scale's residual block. Every scale ends
    in a zero-initialized 1x1 projection, so the encoder is silent at init.
    """

    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        ch, g, td = config.channels, config.groupnorm_groups, config.time_embed_dim
        self.time_mlp = TimeMLP(config.base_width, td)
        self.conv_in = nn.Conv2d(config.latent_channels, ch[0], 3, padding=1)
        self.mask_in = nn.ModuleList()
        self.res = nn.ModuleList()
        self.proj = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.mask_in.append(nn.Conv2d(prev + 1, prev, 3, padding=1))
            self.res.append(ResBlock(prev, c, td, g))
            self.proj.append(zero_conv(c, c))
            if i < NUM_SCALES - 1:
                self.down.append(Downsample(c))
            prev = c

    def forward(self, masked_latent, pyramid, t):
        if masked_latent.shape[1] != self.config.latent_channels:
            raise ShapeError(f"masked latent has {masked_latent.shape[1]} channels")
        temb = self.time_mlp(torch.as_tensor(t).reshape(-1).expand(masked_latent.shape[0]))
        h = self.conv_in(masked_latent)
        out = []
        for i in range(NUM_SCALES):
            level = pyramid[i].to(h.dtype)
            if level.shape[-2:] != h.shape[-2:]:
                raise ShapeError(f"mask level {i + 1} is {tuple(level.shape[-2:])}, "
                                 f"feature is {tuple(h.shape[-2:])}")
            h = self.mask_in[i](torch.cat([h, level.expand(h.shape[0], -1, -1, -1)], dim=1))
            h = self.res[i](h, temb)
            out.append(self.proj[i](h))
            if i < NUM_SCALES - 1:
                h = self.down[i](h)
        return out


def masked_latent(vae, image: torch.Tensor, pm: torch.Tensor) -> torch.Tensor:
    """Latent of the masked image; pixels with pm == 0 are zeroed before encoding."""
    return vae.encode(image * (pm > 0.5).to(image.dtype))
