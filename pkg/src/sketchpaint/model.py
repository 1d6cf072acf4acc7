"""Assembly of the frozen base with the trainable adapters."""
from __future__ import annotations

import hashlib
from typing import Set, Tuple

import torch
import torch.nn as nn

from .diffusion import ConditioningBundle
from .errors import IntegrityError
from .mie import MaskedImageEncoder, inject
from .sbfi import SBFIBlock, SketchEncoder
from .unet import NUM_SCALES, EncoderTap, TextEmbedder, UNet, UNetConfig

FROZEN_GROUPS = ("base", "text")
TRAINABLE_GROUPS = ("mie", "sce", "sbfi")


class InpaintModel(nn.Module):
    """Frozen text-conditioned denoiser plus masked-image encoder, sketch encoder and SBFI blocks.

    ``forward(z_t, t, cond)`` predicts noise. The adapters act only through replacement
    hooks on the base encoder scales: scale i consumes ``sbfi_i(N_i + M_i, S_i)``.
    """

    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        self.text = TextEmbedder(config.text_embed_dim, config.max_tokens, config.vocab_seed)
        self.base = UNet(config)
        self.mie = MaskedImageEncoder(config)
        self.sce = SketchEncoder(config)
        self.sbfi = nn.ModuleList(SBFIBlock(c, config.groupnorm_groups) for c in config.channels)
        self.freeze_base()

    def freeze_base(self):
        for name in FROZEN_GROUPS:
            getattr(self, name).requires_grad_(False)

    def null_text_embedding(self) -> torch.Tensor:
        return self.text.null_embedding

    def encode_text(self, captions) -> torch.Tensor:
        return self.text(captions)

    def base_forward(self, z_t, t, text, tap=None):
        return self.base(z_t, t, text, tap)

    def forward(self, z_t, t, cond: ConditioningBundle, tap: EncoderTap | None = None, records=None):
        """``records`` (optional list) receives one dict of SBFI intermediates per scale."""
        M = self.mie(cond.masked_latent, cond.mask_pyramid, t)
        S = self.sce(cond.sketch, t)
        tap = tap if tap is not None else EncoderTap()

        def make_hook(i):
            def hook(n):
                n_hat = inject([n], [M[i]])[0]
                rec = {} if records is not None else None
                out = self.sbfi[i](n_hat, S[i], rec)
                if rec is not None:
                    rec["n"] = n
                    records.append(rec)
                return out
            return hook

        for i in range(NUM_SCALES):
            tap.hooks[i] = make_hook(i)
        return self.base(z_t, t, cond.text_embedding, tap)


def partition_parameters(model: InpaintModel) -> Tuple[Set[str], Set[str]]:
    """Split parameter names into (frozen, trainable); raises if any name is in neither or both."""
    frozen, trainable = set(), set()
    for name, _ in model.named_parameters():
        group = name.split(".", 1)[0]
        if group in FROZEN_GROUPS:
            frozen.add(name)
        if group in TRAINABLE_GROUPS:
            trainable.add(name)
    check_partition(model, frozen, trainable)
    return frozen, trainable


def check_partition(model, frozen: Set[str], trainable: Set[str]):
    names = [n for n, _ in model.named_parameters()]
    if len(set(names)) != len(names):
        raise IntegrityError("duplicate parameter names")
    both = frozen & trainable
    if both:
        raise IntegrityError(f"parameters in both groups: {sorted(both)[:5]}")
    missing = set(names) - frozen - trainable
    if missing:
        raise IntegrityError(f"parameters in neither group: {sorted(missing)[:5]}")
    extra = (frozen | trainable) - set(names)
    if extra:
        raise IntegrityError(f"unknown parameters: {sorted(extra)[:5]}")


def trainable_parameters(model: InpaintModel):
    _, trainable = partition_parameters(model)
    return [p for n, p in model.named_parameters() if n in trainable]


def frozen_digest(model: InpaintModel) -> str:
    """SHA-256 over the raw bytes of every frozen parameter, in name order."""
    frozen, _ = partition_parameters(model)
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if name in frozen:
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
