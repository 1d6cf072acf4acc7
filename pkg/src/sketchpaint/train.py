"""Adapter training: mask-type mixing, condition dropout, Adam on trainable groups only."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import MASK_TYPES, TrainConfig
from .datagen.corpus import synth_corpus
from .datagen.masks import bbox_mask
from .datagen.pipeline import ManifestRecord, read_manifest
from .diffusion import (ConditioningBundle, NoiseSchedule, build_schedule, draw_training_noise,
                        forward_diffuse, training_loss)
from .errors import IngestionError, IntegrityError
from .mie import downsample_mask
from .model import InpaintModel, frozen_digest, partition_parameters, trainable_parameters
from .vae import PoolVAE, train_vae

log = logging.getLogger(__name__)


def draw_mask_types(rng: np.random.Generator, n: int, mix=(0.6, 0.3, 0.1)) -> np.ndarray:
    """Indices into MASK_TYPES drawn i.i.d. with probabilities ``mix``."""
    return rng.choice(len(MASK_TYPES), size=n, p=np.asarray(mix, dtype=np.float64))


def derive_mask(kind: str, m0: np.ndarray, partial: np.ndarray) -> np.ndarray:
    """Visible-pixel mask (1 = kept) for one of the three training mask types."""
    if kind == "partial":
        return partial.astype(np.float32)
    if kind == "segmentation":
        return (~m0.astype(bool)).astype(np.float32)
    if kind == "bbox":
        return (~bbox_mask(m0)).astype(np.float32)
    raise ValueError(f"unknown mask type {kind!r}")


def to_image_tensor(a: np.ndarray) -> torch.Tensor:
    """HxWxC or HxW numpy -> (1, C, H, W) float32."""
    t = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))
    return t.permute(2, 0, 1)[None] if t.dim() == 3 else t[None, None]


def build_vae(config: TrainConfig, log_fn: Optional[Callable] = None):
    if config.identity_vae:
        return PoolVAE(3, config.unet.latent_channels)
    corpus = synth_corpus(288, config.image_size, np.random.default_rng([config.seed, 7]))
    images = torch.cat([to_image_tensor(s.image) for s in corpus])
    return train_vae(images[:256], images[256:], steps=config.vae_steps, seed=config.seed, log=log_fn)


def pretrain_base(model: InpaintModel, vae, config: TrainConfig, log_fn: Optional[Callable] = None):
    """Fit the text-conditioned denoiser on a synthetic corpus, then freeze it.

    Stands in for a large pretrained text-to-image model: the adapters are always
    trained against a base that already denoises this image domain.
    """
    say = log_fn or log.info
    corpus = synth_corpus(config.base_corpus, config.image_size, np.random.default_rng([config.seed, 11]))
    with torch.no_grad():
        z0 = torch.cat([vae.encode(torch.cat([to_image_tensor(s.image) for s in corpus[i:i + 64]]))
                        for i in range(0, len(corpus), 64)])
        text = model.encode_text([s.caption for s in corpus])
    null = model.null_text_embedding()
    sched = build_schedule(config.T, config.beta_start, config.beta_end, config.schedule)
    base = model.base
    base.requires_grad_(True)
    opt = torch.optim.Adam(base.parameters(), lr=config.base_learning_rate, betas=config.adam_betas,
                           eps=config.adam_eps)
    gen = torch.Generator().manual_seed(config.seed + 101)
    base.train()
    for step in range(1, config.base_steps + 1):
        idx = torch.randint(0, len(z0), (config.base_batch_size,), generator=gen)
        d = draw_training_noise(z0[idx].shape, sched.T, gen, config.text_dropout, 0.0)
        txt = torch.where(d.drop_text[:, None, None], null.expand_as(text[idx]), text[idx])
        pred = base(forward_diffuse(z0[idx], d.t, d.eps, sched), d.t, txt)
        loss = torch.mean((pred - d.eps) ** 2)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if config.log_every and step % config.log_every == 0:
            say(f"base step {step} loss {loss.item():.5f}")
    model.freeze_base()
    return model


@dataclass
class TrainingSet:
    """Pre-encoded tensors for every sample under each of the three mask types."""

    ids: List[str]
    z0: torch.Tensor                      # (N, C, h, w)
    text: torch.Tensor                    # (N, L, D)
    masks: torch.Tensor                   # (K, N, 1, H, W) visible masks per type
    masked_latents: torch.Tensor          # (K, N, C, h, w)
    sketches: torch.Tensor                # (K, N, 1, H, W) partial sketches per type
    images: torch.Tensor                  # (N, 3, H, W)

    def __len__(self):
        return len(self.ids)

    def bundle(self, idx, kinds) -> ConditioningBundle:
        idx, kinds = torch.as_tensor(idx), torch.as_tensor(kinds)
        masks = self.masks[kinds, idx]
        return ConditioningBundle(self.text[idx], self.masked_latents[kinds, idx],
                                  downsample_mask(masks), self.sketches[kinds, idx])


@torch.no_grad()
def prepare_training_set(records: List[ManifestRecord], model: InpaintModel, vae,
                         config: TrainConfig) -> TrainingSet:
    size = config.image_size
    ids, images, masks, sketches = [], [], [], []
    for rec in records:
        try:
            image, m0 = rec.load("image"), rec.load("instance_mask")
            sketch, partial = rec.load("sketch"), rec.load("partial_mask")
        except (OSError, KeyError) as exc:
            raise IngestionError(f"sample {rec.id}: {exc}") from None
        if image.shape[:2] != (size, size):
            raise IngestionError(f"sample {rec.id}: image is {image.shape[:2]}, config expects {size}")
        per_type = [derive_mask(k, m0, partial) for k in MASK_TYPES]
        ids.append(rec.id)
        images.append(to_image_tensor(image))
        masks.append(torch.stack([to_image_tensor(m)[0] for m in per_type]))
        sketches.append(torch.stack([to_image_tensor((1 - m) * m0 * sketch)[0] for m in per_type]))
    images = torch.cat(images)
    masks = torch.stack(masks, 1)          # (K, N, 1, H, W)
    sketches = torch.stack(sketches, 1)
    z0 = vae.encode(images)
    masked_latents = torch.stack([vae.encode(images * masks[k]) for k in range(len(MASK_TYPES))])
    text = model.encode_text([r.caption for r in records])
    return TrainingSet(ids, z0, text, masks, masked_latents, sketches, images)


@torch.no_grad()
def evaluation_loss(model, data: TrainingSet, sched: NoiseSchedule, seed: int = 1234, draws: int = 4,
                    kind: int = 0) -> float:
    """Noise-prediction MSE over every sample with fixed (t, eps) draws and no dropout."""
    gen = torch.Generator().manual_seed(seed)
    idx = torch.arange(len(data))
    cond = data.bundle(idx, torch.full_like(idx, kind))
    total = 0.0
    for _ in range(draws):
        d = draw_training_noise(data.z0.shape, sched.T, gen, 0.0, 0.0)
        pred = model(forward_diffuse(data.z0, d.t, d.eps, sched), d.t, cond)
        total += torch.mean((pred - d.eps) ** 2).item()
    return total / draws


@dataclass
class TrainResult:
    model: InpaintModel
    vae: object
    data: TrainingSet
    losses: List[float] = field(default_factory=list)
    eval_initial: float = float("nan")
    eval_final: float = float("nan")
    mask_type_counts: List[int] = field(default_factory=lambda: [0, 0, 0])
    checkpoint: Optional[Path] = None
    step: int = 0
    frozen_digest_start: str = ""
    frozen_digest_end: str = ""


class NaNLossError(FloatingPointError):
    pass


def train(config: TrainConfig, manifest, out_dir=None, log_fn: Optional[Callable] = None,
          vae=None, limit: Optional[int] = None) -> TrainResult:
    """Train the adapters on the samples listed in ``manifest``.

    Writes ``checkpoint.ckpt`` (and periodic ``step_XXXXXX.ckpt``) into ``out_dir`` when given.
    """
    say = log_fn or log.info
    records = read_manifest(manifest)
    if limit is not None:
        records = records[:limit]
    if not records:
        raise IngestionError("manifest contains no samples")
    if vae is None:
        vae = build_vae(config, say)
    torch.manual_seed(config.seed)
    model = InpaintModel(config.unet)
    if config.base_steps:
        pretrain_base(model, vae, config, say)
    frozen, _ = partition_parameters(model)
    data = prepare_training_set(records, model, vae, config)
    sched = build_schedule(config.T, config.beta_start, config.beta_end, config.schedule)
    params = trainable_parameters(model)
    opt = torch.optim.Adam(params, lr=config.learning_rate, betas=config.adam_betas, eps=config.adam_eps)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(model, vae, data)
    result.frozen_digest_start = frozen_digest(model)
    result.eval_initial = evaluation_loss(model, data, sched)
    say(f"step 0 eval loss {result.eval_initial:.5f}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model.train()
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(data), size=config.batch_size)
        kinds = draw_mask_types(rng, config.batch_size, config.mask_mix)
        for k in kinds:
            result.mask_type_counts[k] += 1
        loss = training_loss(model, data.z0[idx], data.bundle(idx, kinds), sched, gen,
                             config.text_dropout, config.sketch_dropout)
        if not math.isfinite(loss.item()):
            bad = [data.ids[i] for i in idx]
            raise NaNLossError(f"non-finite loss at step {step}; batch ids {bad}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        result.losses.append(loss.item())
        if config.log_every and step % config.log_every == 0:
            recent = np.mean(result.losses[-config.log_every:])
            say(f"step {step} loss {recent:.5f}")
        if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(model, out / f"step_{step:06d}.ckpt", vae=vae, config=config, step=step,
                            generator=gen, rng=rng)
    model.eval()
    result.step = config.steps
    result.frozen_digest_end = frozen_digest(model)
    if result.frozen_digest_end != result.frozen_digest_start:
        raise IntegrityError("frozen parameters changed during training")
    result.eval_final = evaluation_loss(model, data, sched)
    say(f"final eval loss {result.eval_final:.5f}")
    if out is not None:
        result.checkpoint = save_checkpoint(model, out / "checkpoint.ckpt", vae=vae, config=config,
                                            step=config.steps, generator=gen, rng=rng)
    return result
