"""Training configuration and its key-value text format.

One ``key = value`` pair per line, values JSON-encoded, keys in declaration order.
Denoiser architecture keys carry a ``unet.`` prefix. Lines starting with ``#`` and
blank lines are ignored.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import IngestionError, ParameterError
from .unet import UNetConfig

MASK_TYPES = ("partial", "segmentation", "bbox")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 4
    steps: int = 2000
    mask_mix: tuple = (0.6, 0.3, 0.1)
    text_dropout: float = 0.1
    sketch_dropout: float = 0.1
    seed: int = 0
    image_size: int = 128
    latent_size: int = 16
    identity_vae: bool = False
    vae_steps: int = 1500
    base_steps: int = 1500
    base_learning_rate: float = 1e-3
    base_batch_size: int = 16
    base_corpus: int = 512
    schedule: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    log_every: int = 100
    checkpoint_every: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        self.mask_mix = tuple(float(p) for p in self.mask_mix)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if isinstance(self.unet, dict):
            self.unet = UNetConfig.from_dict(self.unet)
        if len(self.mask_mix) != 3 or any(p < 0 for p in self.mask_mix):
            raise ParameterError("mask_mix must be three non-negative probabilities")
        if abs(sum(self.mask_mix) - 1.0) > 1e-9:
            raise ParameterError(f"mask_mix must sum to 1, got {sum(self.mask_mix)}")
        if self.image_size != 8 * self.latent_size:
            raise ParameterError("image_size must be 8 x latent_size")
        if self.latent_size % 8:
            raise ParameterError("latent_size must be divisible by 8")
        if self.base_steps < 0 or self.base_batch_size < 1 or self.base_corpus < 1:
            raise ParameterError("base_steps must be >= 0, base_batch_size and base_corpus >= 1")
        if self.batch_size < 1 or self.steps < 0:
            raise ParameterError("batch_size must be >= 1 and steps >= 0")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "unet":
                for k, uv in v.to_dict().items():
                    out[f"unet.{k}"] = uv
            else:
                out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unet = {k[5:]: d.pop(k) for k in list(d) if k.startswith("unet.")}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        base = UNetConfig().to_dict()
        base.update(unet)
        return cls(**d, unet=UNetConfig.from_dict(base))

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def loads(cls, text: str) -> "TrainConfig":
        d = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            if "=" not in s:
                raise IngestionError("expected 'key = value'", lineno)
            k, v = (p.strip() for p in s.split("=", 1))
            try:
                d[k] = json.loads(v)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"bad value for {k!r}: {exc.msg}", lineno) from None
        return cls.from_dict(d)

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))
