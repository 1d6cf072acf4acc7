"""Sketch-conditional encoder and the per-scale bidirectional interaction block."""
from __future__ import annotations

from typing import List

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError
from .mie import zero_conv
from .unet import NUM_SCALES, Downsample, ResBlock, TimeMLP, UNetConfig

UNSHUFFLE_FACTOR = 8
GN_EPS = 1e-5


def space_to_channel(s0: torch.Tensor, factor: int = UNSHUFFLE_FACTOR) -> torch.Tensor:
    """Lossless pixel unshuffle: (B, C, H, W) -> (B, C*f*f, H/f, W/f)."""
    if s0.shape[-1] % factor or s0.shape[-2] % factor:
        raise ShapeError(f"sketch side {tuple(s0.shape[-2:])} not divisible by {factor}")
    return F.pixel_unshuffle(s0, factor)


class SketchEmbed(nn.Module):
    """Pixel unshuffle to latent resolution followed by a trained 1x1 projection."""

    def __init__(self, out_ch: int, in_ch: int = 1, factor: int = UNSHUFFLE_FACTOR):
        super().__init__()
        self.factor = factor
        # no bias: a black sketch must embed to exact zeros
        self.proj = nn.Conv2d(in_ch * factor * factor, out_ch, 1, bias=False)

    def forward(self, s0):
        return self.proj(space_to_channel(s0, self.factor))


class SketchEncoder(nn.Module):
    """Multi-scale sketch features S_1..S_4, shaped like the modulated noisy features."""

    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        ch, g, td = config.channels, config.groupnorm_groups, config.time_embed_dim
        self.embed = SketchEmbed(ch[0])
        self.time_mlp = TimeMLP(config.base_width, td)
        self.res = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.res.append(ResBlock(prev, c, td, g))
            if i < NUM_SCALES - 1:
                self.down.append(Downsample(c))
            prev = c

    def forward(self, sketch, t) -> List[torch.Tensor]:
        return self.encode_embedded(self.embed(sketch), t)

    def encode_embedded(self, h, t) -> List[torch.Tensor]:
        temb = self.time_mlp(torch.as_tensor(t).reshape(-1).expand(h.shape[0]))
        out = []
        for i in range(NUM_SCALES):
            h = self.res[i](h, temb)
            out.append(h)
            if i < NUM_SCALES - 1:
                h = self.down[i](h)
        return out


class SBFIBlock(nn.Module):
    """Context-aware fusion followed by sketch-conditional affine modulation.

    fusion:      x = N_hat + zc(S);  vm = sigmoid(GN(conv(x)))  with vm single-channel
    modulation:  x_hat = vm * (gamma(S) * GN(x) + beta(S))
    output:      N_hat + x_hat

    gamma and beta are zero-initialized 1x1 convs on S, globally average pooled to
    one value per channel. The vm conv uses replicate padding so a constant input
    gives a constant map.
    """

    def __init__(self, channels: int, groups: int = 8):
        super().__init__()
        self.channels, self.groups = channels, groups
        self.fuse = zero_conv(channels, channels)
        self.vm_conv = nn.Conv2d(channels, 1, 3, padding=1, padding_mode="replicate")
        self.vm_norm = nn.GroupNorm(1, 1)
        self.gamma = zero_conv(channels, channels)
        self.beta = zero_conv(channels, channels)

    def fuse_context(self, n_hat, s):
        if n_hat.shape != s.shape:
            raise ShapeError(f"{tuple(n_hat.shape)} vs {tuple(s.shape)}")
        x = n_hat + self.fuse(s)
        v = self.vm_conv(x)
        # single-group norm written out: nn.GroupNorm refuses a 1x1 map in training mode
        mean = v.mean(dim=(1, 2, 3), keepdim=True)
        var = v.var(dim=(1, 2, 3), unbiased=False, keepdim=True)
        v = (v - mean) / torch.sqrt(var + self.vm_norm.eps)
        vm = torch.sigmoid(v * self.vm_norm.weight.view(1, -1, 1, 1) + self.vm_norm.bias.view(1, -1, 1, 1))
        return x, vm

    def affine_params(self, s):
        return self.gamma(s).mean(dim=(2, 3), keepdim=True), self.beta(s).mean(dim=(2, 3), keepdim=True)

    def normalize(self, x):
        return F.group_norm(x, self.groups, eps=GN_EPS)

    def affine_modulate(self, x, s, vm, gamma=None, beta=None):
        if x.shape != s.shape:
            raise ShapeError(f"{tuple(x.shape)} vs {tuple(s.shape)}")
        if vm.shape[1] != 1 or vm.shape[-2:] != x.shape[-2:]:
            raise ShapeError(f"vm {tuple(vm.shape)} does not broadcast over {tuple(x.shape)}")
        if gamma is None or beta is None:
            g, b = self.affine_params(s)
            gamma = g if gamma is None else gamma
            beta = b if beta is None else beta
        return vm * (gamma * self.normalize(x) + beta)

    def forward(self, n_hat, s, record: dict | None = None):
        x, vm = self.fuse_context(n_hat, s)
        gamma, beta = self.affine_params(s)
        x_hat = self.affine_modulate(x, s, vm, gamma, beta)
        out = n_hat + x_hat
        if record is not None:
            record.update(n_hat=n_hat, s=s, x=x, vm=vm, vm_gamma=vm * gamma, vm_beta=vm * beta,
                          x_hat=x_hat, sn_hat=out)
        return out


def sbfi(n_hat, s, block: SBFIBlock):
    return block(n_hat, s)
