import numpy as np
import pytest
import torch

from sketchpaint.diffusion import ConditioningBundle
from sketchpaint.mie import downsample_mask
from sketchpaint.model import InpaintModel
from sketchpaint.unet import UNetConfig

# 8x8 latents, 64x64 images: the smallest size that keeps all four scales.
TINY = UNetConfig(base_width=8, text_embed_dim=8, max_tokens=6)
TINY_LATENT = 8
TINY_IMAGE = 64


@pytest.fixture
def tiny_config():
    return TINY


def make_model(config=TINY, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return InpaintModel(config).to(dtype)


def randomize_adapters(model, seed=1, scale=0.1):
    """Give every zero-initialized adapter tensor random values so all paths are live."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.split(".")[0] in ("mie", "sce", "sbfi"):
                p.add_(scale * torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype))
    return model


def make_bundle(model, batch=2, seed=0, dtype=torch.float32, latent=TINY_LATENT, image=TINY_IMAGE,
                captions=None):
    gen = torch.Generator().manual_seed(seed)
    c = model.config.latent_channels
    masks = (torch.rand(batch, 1, image, image, generator=gen) > 0.3).to(dtype)
    sketch = (torch.rand(batch, 1, image, image, generator=gen) > 0.8).to(dtype)
    captions = captions or [f"a red bird number {i}" for i in range(batch)]
    return ConditioningBundle(
        model.encode_text(captions).to(dtype),
        torch.randn(batch, c, latent, latent, generator=gen, dtype=torch.float64).to(dtype),
        downsample_mask(masks),
        sketch,
    )


@pytest.fixture
def tiny_model():
    return make_model()
