"""Inference: encode conditions, DDIM with guidance, decode and composite."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .diffusion import ConditioningBundle, NoiseSchedule, build_schedule, ddim_sample
from .errors import ShapeError
from .mie import downsample_mask
from .train import to_image_tensor


def composite(original: torch.Tensor, generated: torch.Tensor, pm: torch.Tensor) -> torch.Tensor:
    """Visible pixels (pm == 1) come from ``original`` bit for bit, the rest from ``generated``."""
    return torch.where(pm.bool().expand_as(original), original, generated)


def _as_batch(x, channels: int) -> torch.Tensor:
    t = x if torch.is_tensor(x) else to_image_tensor(np.asarray(x))
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[None] if t.shape[0] == channels else t.permute(2, 0, 1)[None]
    return t.to(torch.float32)


@torch.no_grad()
def infer_batch(model, vae, masked_images: torch.Tensor, pms: torch.Tensor, sketches: torch.Tensor,
                captions: Sequence[str], steps: int = 50, cfg: float = 7.5, seed: int = 0,
                sched: NoiseSchedule | None = None, image_size: int | None = None) -> torch.Tensor:
    """Batched inpainting. Inputs are (B, 3, H, W), (B, 1, H, W), (B, 1, H, W); returns (B, 3, H, W)."""
    b, _, h, w = masked_images.shape
    if image_size is not None and (h, w) != (image_size, image_size):
        raise ShapeError(f"inputs are {h}x{w}, model expects {image_size}x{image_size}")
    if pms.shape[-2:] != (h, w) or sketches.shape[-2:] != (h, w):
        raise ShapeError("image, mask and sketch resolutions differ")
    if len(captions) != b:
        raise ShapeError(f"{len(captions)} captions for {b} images")
    sched = sched or build_schedule()
    pms = (pms > 0.5).to(masked_images.dtype)
    visible = masked_images * pms
    cond = ConditioningBundle(model.encode_text(list(captions)), vae.encode(visible),
                              downsample_mask(pms), sketches.to(masked_images.dtype))
    z0 = ddim_sample(model, cond, sched, steps, cfg, seed)
    generated = vae.decode(z0).clamp(0, 1)
    return composite(masked_images, generated, pms)


def infer(model, vae, masked_image, pm, sketch, caption: str, steps: int = 50, cfg: float = 7.5,
          seed: int = 0, sched: NoiseSchedule | None = None, image_size: int | None = None) -> np.ndarray:
    """Single-image inpainting; numpy HxWx3 / HxW in, HxWx3 float32 in [0, 1] out.

    An all-zero sketch runs text-only guidance.
    """
    out = infer_batch(model, vae, _as_batch(masked_image, 3), _as_batch(pm, 1), _as_batch(sketch, 1),
                      [caption], steps, cfg, seed, sched, image_size)
    return out[0].permute(1, 2, 0).numpy()


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
