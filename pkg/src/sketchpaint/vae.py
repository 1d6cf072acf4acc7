"""Toy latent autoencoder (8x spatial reduction) and an identity stand-in."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

DOWNSCALE = 8


class ToyVAE(nn.Module):
    """Two conv layers down (4x then 2x), two transposed convs up.

    Latents are multiplied by ``scale`` (set after training to give unit variance).
    Images are in [0, 1].
    """

    identity = False

    def __init__(self, image_channels: int = 3, latent_channels: int = 4, hidden: int = 64):
        super().__init__()
        self.image_channels, self.latent_channels = image_channels, latent_channels
        self.enc = nn.Sequential(nn.Conv2d(image_channels, hidden, 4, stride=4), nn.SiLU(),
                                 nn.Conv2d(hidden, latent_channels, 2, stride=2))
        self.dec = nn.Sequential(nn.ConvTranspose2d(latent_channels, hidden, 2, stride=2), nn.SiLU(),
                                 nn.ConvTranspose2d(hidden, image_channels, 4, stride=4))
        self.register_buffer("scale", torch.ones(()))
        self.register_buffer("val_error", torch.full((), float("nan")))

    def encode(self, image):
        if image.shape[1] != self.image_channels:
            raise ShapeError(f"expected {self.image_channels} image channels, got {image.shape[1]}")
        if image.shape[-1] % DOWNSCALE or image.shape[-2] % DOWNSCALE:
            raise ShapeError(f"image side must be divisible by {DOWNSCALE}, got {tuple(image.shape[-2:])}")
        return self.enc(image * 2 - 1) * self.scale

    def decode(self, latent):
        return (self.dec(latent / self.scale) + 1) / 2


class IdentityVAE(nn.Module):
    """Images already live at latent resolution with latent channel count."""

    identity = True

    def __init__(self, latent_channels: int = 4):
        super().__init__()
        self.image_channels = self.latent_channels = latent_channels

    def encode(self, image):
        if image.shape[1] != self.latent_channels:
            raise ShapeError(f"identity mode needs {self.latent_channels} channels, got {image.shape[1]}")
        return image

    def decode(self, latent):
        return latent


def vae_encode(image, vae) -> torch.Tensor:
    return vae.encode(image)


def vae_decode(latent, vae) -> torch.Tensor:
    return vae.decode(latent)


def reconstruction_error(vae, images, batch_size: int = 32) -> float:
    """Mean per-pixel squared error of encode-then-decode."""
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = images[i:i + batch_size]
            total += F.mse_loss(vae.decode(vae.encode(x)), x, reduction="sum").item()
            count += x.numel()
    return total / count


def train_vae(train_images, val_images, steps: int = 1500, lr: float = 2e-3, batch_size: int = 16,
              seed: int = 0, log=None) -> ToyVAE:
    """Fit a ToyVAE, set its latent scale, freeze it and record validation error."""
    torch.manual_seed(seed)
    vae = ToyVAE(train_images.shape[1])
    opt = torch.optim.Adam(vae.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    for step in range(steps):
        idx = torch.randint(0, len(train_images), (batch_size,), generator=gen)
        x = train_images[idx]
        loss = F.mse_loss(vae.decode(vae.encode(x)), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None and step % 250 == 0:
            log(f"vae step {step} loss {loss.item():.5f}")
    with torch.no_grad():
        lat = torch.cat([vae.enc(train_images[i:i + 64] * 2 - 1) for i in range(0, len(train_images), 64)])
        vae.scale.fill_(1.0 / lat.std().item())
    vae.requires_grad_(False)
    vae.val_error.fill_(reconstruction_error(vae, val_images))
    return vae


class PoolVAE(nn.Module):
    """Fixed stand-in for fast runs: 8x average pooling, channels zero-padded to the latent width."""

    identity = True

    def __init__(self, image_channels: int = 3, latent_channels: int = 4):
        super().__init__()
        self.image_channels, self.latent_channels = image_channels, latent_channels
        self.register_buffer("val_error", torch.full((), float("nan")))

    def encode(self, image):
        if image.shape[-1] % DOWNSCALE or image.shape[-2] % DOWNSCALE:
            raise ShapeError(f"image side must be divisible by {DOWNSCALE}")
        pooled = F.avg_pool2d(image * 2 - 1, DOWNSCALE)
        pad = self.latent_channels - pooled.shape[1]
        return F.pad(pooled, (0, 0, 0, 0, 0, pad))

    def decode(self, latent):
        x = latent[:, : self.image_channels]
        return (F.interpolate(x, scale_factor=DOWNSCALE, mode="nearest") + 1) / 2
