"""Toy text-conditioned U-Net denoiser with tappable encoder scales."""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError

NUM_SCALES = 4


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = 4
    base_width: int = 32
    channel_multipliers: tuple = (1, 2, 4, 4)
    attention_scales: tuple = (3, 4)  # 1-based scale indices
    text_embed_dim: int = 32
    groupnorm_groups: int = 8
    max_tokens: int = 16
    vocab_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        object.__setattr__(self, "attention_scales", tuple(sorted(int(s) for s in self.attention_scales)))
        if len(self.channel_multipliers) != NUM_SCALES:
            raise ParameterError(f"channel_multipliers needs exactly {NUM_SCALES} entries")
        for c in self.channels:
            if c % self.groupnorm_groups:
                raise ParameterError(f"groupnorm_groups={self.groupnorm_groups} does not divide {c}")
        if any(not 1 <= s <= NUM_SCALES for s in self.attention_scales):
            raise ParameterError("attention_scales must be within 1..4")

    @property
    def channels(self) -> List[int]:
        return [self.base_width * m for m in self.channel_multipliers]

    @property
    def time_embed_dim(self) -> int:
        return self.base_width * 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_scales"] = list(self.attention_scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    t = torch.as_tensor(t).reshape(-1).to(torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimeMLP(nn.Module):
    def __init__(self, base_width: int, out_dim: int):
        super().__init__()
        self.base_width = base_width
        self.net = nn.Sequential(nn.Linear(base_width, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t):
        w = self.net[0].weight
        return self.net(timestep_embedding(t, self.base_width).to(w.dtype))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Single-head attention from spatial features to text tokens."""

    def __init__(self, channels: int, context_dim: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(context_dim, channels, bias=False)
        self.v = nn.Linear(context_dim, channels, bias=False)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, context):
        b, c, h, w = x.shape
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))
        k, v = self.k(context), self.v(context)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.out(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


@dataclass
class EncoderTap:
    """Per-call record of the encoder features plus optional replacement hooks.

    ``hooks[i]`` (0-based scale) receives the encoder feature of that scale and
    returns the tensor fed to both the next encoder stage and the skip connection.
    """

    hooks: Dict[int, Callable[[torch.Tensor], torch.Tensor]] = field(default_factory=dict)
    features: List[torch.Tensor] = field(default_factory=list)
    consumed: List[torch.Tensor] = field(default_factory=list)
    decoder: List[torch.Tensor] = field(default_factory=list)


class UNet(nn.Module):
    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        ch, g, td = config.channels, config.groupnorm_groups, config.time_embed_dim
        self.time_mlp = TimeMLP(config.base_width, td)
        self.conv_in = nn.Conv2d(config.latent_channels, ch[0], 3, padding=1)
        self.enc_res = nn.ModuleList()
        self.enc_attn = nn.ModuleDict()
        self.down = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.enc_res.append(ResBlock(prev, c, td, g))
            if i + 1 in config.attention_scales:
                self.enc_attn[str(i)] = CrossAttention(c, config.text_embed_dim, g)
            if i < NUM_SCALES - 1:
                self.down.append(Downsample(c))
            prev = c
        self.mid_res1 = ResBlock(ch[-1], ch[-1], td, g)
        self.mid_attn = CrossAttention(ch[-1], config.text_embed_dim, g)
        self.mid_res2 = ResBlock(ch[-1], ch[-1], td, g)
        self.dec_res = nn.ModuleList()
        self.dec_attn = nn.ModuleDict()
        self.up = nn.ModuleList()
        for i, c in enumerate(ch):
            below = ch[-1] if i == NUM_SCALES - 1 else ch[i + 1]
            self.dec_res.append(ResBlock(below + c, c, td, g))
            if i + 1 in config.attention_scales:
                self.dec_attn[str(i)] = CrossAttention(c, config.text_embed_dim, g)
            if i > 0:
                self.up.append(Upsample(c))
        self.norm_out = nn.GroupNorm(g, ch[0])
        self.conv_out = nn.Conv2d(ch[0], config.latent_channels, 3, padding=1)

    def forward(self, z_t, t, text, tap: Optional[EncoderTap] = None):
        if z_t.dim() != 4 or z_t.shape[1] != self.config.latent_channels:
            raise ShapeError(f"expected (B, {self.config.latent_channels}, H, W), got {tuple(z_t.shape)}")
        if z_t.shape[-1] % 2 ** (NUM_SCALES - 1) or z_t.shape[-2] % 2 ** (NUM_SCALES - 1):
            raise ShapeError(f"latent side must be divisible by {2 ** (NUM_SCALES - 1)}")
        t = torch.as_tensor(t).reshape(-1).expand(z_t.shape[0])
        temb = self.time_mlp(t)
        h = self.conv_in(z_t)
        skips = []
        for i in range(NUM_SCALES):
            h = self.enc_res[i](h, temb)
            if str(i) in self.enc_attn:
                h = self.enc_attn[str(i)](h, text)
            if tap is not None:
                tap.features.append(h)
                if i in tap.hooks:
                    h = tap.hooks[i](h)
                tap.consumed.append(h)
            skips.append(h)
            if i < NUM_SCALES - 1:
                h = self.down[i](h)
        h = self.mid_res2(self.mid_attn(self.mid_res1(h, temb), text), temb)
        for i in reversed(range(NUM_SCALES)):
            h = self.dec_res[i](torch.cat([h, skips[i]], dim=1), temb)
            if str(i) in self.dec_attn:
                h = self.dec_attn[str(i)](h, text)
            if tap is not None:
                tap.decoder.insert(0, h)
            if i > 0:
                h = self.up[i - 1](h)
        return self.conv_out(F.silu(self.norm_out(h)))


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(caption: str) -> List[str]:
    return _TOKEN_RE.findall(caption.lower())


class TextEmbedder(nn.Module):
    """Deterministic hashed-token text encoder standing in for a pretrained one.

    Each token maps to a Gaussian vector seeded by a hash of (vocab seed, token);
    a fixed positional table is added. Unused positions, and the whole sequence
    for an empty caption, take the rows of ``null_embedding``.
    """

    def __init__(self, embed_dim: int = 32, max_tokens: int = 16, seed: int = 0):
        super().__init__()
        self.embed_dim, self.max_tokens, self.seed = embed_dim, max_tokens, seed
        rng = np.random.default_rng([seed, 1])
        self.null_embedding = nn.Parameter(
            torch.from_numpy(rng.standard_normal((max_tokens, embed_dim))).float())
        self.position = nn.Parameter(
            torch.from_numpy(0.1 * rng.standard_normal((max_tokens, embed_dim))).float())
        self.requires_grad_(False)

    def token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}:{token}".encode(), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.standard_normal(self.embed_dim)

    def encode(self, caption: str) -> torch.Tensor:
        tokens = tokenize(caption)[: self.max_tokens]
        out = self.null_embedding.detach().clone()
        for k, tok in enumerate(tokens):
            vec = torch.from_numpy(self.token_vector(tok)).to(out.dtype)
            out[k] = vec + self.position[k]
        return out

    def forward(self, captions) -> torch.Tensor:
        if isinstance(captions, str):
            captions = [captions]
        return torch.stack([self.encode(c) for c in captions])
