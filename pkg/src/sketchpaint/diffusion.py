"""Noise schedule, forward process, epsilon objective, DDIM sampling and CFG."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ParameterError, ShapeError

SCHEDULE_KINDS = ("linear", "scaled_linear", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels ``alpha_bar[t]`` for ``t = 0..T``; ``alpha_bar[0] == 1``."""

    T: int
    alpha_bar: np.ndarray
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    kind: str = "linear"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.shape != (self.T + 1,):
            raise ShapeError(f"alpha_bar must have T+1={self.T + 1} entries, got {ab.shape}")
        if ab[0] != 1.0:
            raise ParameterError("alpha_bar[0] must be exactly 1.0")
        if not (np.all(ab > 0) and np.all(ab <= 1)):
            raise ParameterError("alpha_bar must lie in (0, 1]")
        if not np.all(np.diff(ab) < 0):
            raise ParameterError("alpha_bar must be strictly decreasing")

    def coefficients(self, t, like: torch.Tensor):
        """sqrt(alpha_bar_t) and sqrt(1 - alpha_bar_t), broadcastable against ``like``."""
        ab = torch.as_tensor(self.alpha_bar, dtype=torch.float64)[torch.as_tensor(t)]
        shape = (-1,) + (1,) * (like.dim() - 1) if ab.dim() else ()
        ab = ab.reshape(shape)
        return ab.sqrt().to(like.dtype), (1 - ab).sqrt().to(like.dtype)


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2,
                   kind: str = "linear") -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ParameterError(f"T must be an integer >= 1, got {T!r}")
    if not beta_start > 0:
        raise ParameterError(f"beta_start must be > 0, got {beta_start}")
    if not beta_start <= beta_end:
        raise ParameterError(f"beta_end must be >= beta_start, got {beta_end}")
    if not beta_end < 1:
        raise ParameterError(f"beta_end must be < 1, got {beta_end}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "scaled_linear":
        # linear in sqrt(beta), the latent-diffusion convention
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2
    elif kind == "cosine":
        # beta bounds only clip the cosine family
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], beta_start, 0.999)
    else:
        raise ParameterError(f"kind must be one of {SCHEDULE_KINDS}, got {kind!r}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(int(T), alpha_bar, float(beta_start), float(beta_end), kind)


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps; ``t`` is an int or a per-batch index tensor."""
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    tt = torch.as_tensor(t)
    if tt.numel() and (int(tt.min()) < 0 or int(tt.max()) > sched.T):
        raise ParameterError(f"t must lie in [0, {sched.T}]")
    a, b = sched.coefficients(tt, z0)
    return a * z0 + b * eps


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(f"{tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    # exact endpoints, the affine form rounds
    if scale == 1:
        return eps_cond.clone()
    if scale == 0:
        return eps_uncond.clone()
    return eps_uncond + scale * (eps_cond - eps_uncond)


@dataclass
class ConditioningBundle:
    """Everything the adapted denoiser is conditioned on, batched along dim 0.

    ``mask_pyramid`` holds the four binary mask levels aligned with the denoiser
    scales; ``sketch`` is the full-resolution single-channel partial sketch.
    """

    text_embedding: torch.Tensor
    masked_latent: torch.Tensor
    mask_pyramid: Sequence[torch.Tensor]
    sketch: torch.Tensor
    text_null: torch.Tensor = None
    sketch_null: torch.Tensor = None

    def __post_init__(self):
        b = self.masked_latent.shape[0]
        if self.text_null is None:
            self.text_null = torch.zeros(b, dtype=torch.bool)
        if self.sketch_null is None:
            self.sketch_null = torch.zeros(b, dtype=torch.bool)
        self.mask_pyramid = list(self.mask_pyramid)

    @property
    def batch_size(self) -> int:
        return self.masked_latent.shape[0]

    def nulled(self, drop_text, drop_sketch, null_text: torch.Tensor) -> "ConditioningBundle":
        """Copy with text swapped for ``null_text`` and sketch blacked out where flagged."""
        drop_text = torch.as_tensor(drop_text, dtype=torch.bool).expand(self.batch_size)
        drop_sketch = torch.as_tensor(drop_sketch, dtype=torch.bool).expand(self.batch_size)
        null = null_text.to(self.text_embedding).expand_as(self.text_embedding)
        text = torch.where(drop_text.view(-1, 1, 1), null, self.text_embedding)
        sketch = torch.where(drop_sketch.view(-1, 1, 1, 1), torch.zeros_like(self.sketch), self.sketch)
        return replace(self, text_embedding=text, sketch=sketch,
                       text_null=self.text_null | drop_text, sketch_null=self.sketch_null | drop_sketch)

    def cat(self, other: "ConditioningBundle") -> "ConditioningBundle":
        return ConditioningBundle(
            torch.cat([self.text_embedding, other.text_embedding]),
            torch.cat([self.masked_latent, other.masked_latent]),
            [torch.cat([a, b]) for a, b in zip(self.mask_pyramid, other.mask_pyramid)],
            torch.cat([self.sketch, other.sketch]),
            torch.cat([self.text_null, other.text_null]),
            torch.cat([self.sketch_null, other.sketch_null]),
        )

    def index(self, idx) -> "ConditioningBundle":
        return ConditioningBundle(self.text_embedding[idx], self.masked_latent[idx],
                                  [m[idx] for m in self.mask_pyramid], self.sketch[idx],
                                  self.text_null[idx], self.sketch_null[idx])


@dataclass
class NoiseDraw:
    t: torch.Tensor
    eps: torch.Tensor
    drop_text: torch.Tensor
    drop_sketch: torch.Tensor


def draw_training_noise(shape, T: int, generator: torch.Generator, p_text: float = 0.1,
                        p_sketch: float = 0.1, dtype=torch.float32) -> NoiseDraw:
    """All random draws of one training step, in a fixed order."""
    b = shape[0]
    t = torch.randint(1, T + 1, (b,), generator=generator)
    eps = torch.randn(shape, generator=generator, dtype=dtype)
    drop_text = torch.rand(b, generator=generator) < p_text
    drop_sketch = torch.rand(b, generator=generator) < p_sketch
    return NoiseDraw(t, eps, drop_text, drop_sketch)


def training_loss(model: Callable, z0: torch.Tensor, cond: ConditioningBundle, sched: NoiseSchedule,
                  generator: torch.Generator, p_text: float = 0.1, p_sketch: float = 0.1,
                  null_text: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error between the drawn noise and the model's prediction.

    Condition dropout replaces text by ``null_text`` (default: ``model.null_text_embedding()``)
    and the sketch by zeros, independently per sample.
    """
    if z0.shape[0] == 0:
        raise ShapeError("empty batch")
    draw = draw_training_noise(z0.shape, sched.T, generator, p_text, p_sketch, z0.dtype)
    if null_text is None:
        null_text = model.null_text_embedding()
    cond = cond.nulled(draw.drop_text, draw.drop_sketch, null_text)
    z_t = forward_diffuse(z0, draw.t, draw.eps, sched)
    pred = model(z_t, draw.t, cond)
    return F.mse_loss(pred, draw.eps)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    if not 1 <= steps <= T:
        raise ParameterError(f"steps must lie in [1, {T}], got {steps}")
    return np.round(np.linspace(T, 0, steps + 1)).astype(np.int64)


def ddim_step(z: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``."""
    a_t, b_t = sched.coefficients(t, z)
    a_p, b_p = sched.coefficients(t_prev, z)
    z0_pred = (z - b_t * eps) / a_t
    return a_p * z0_pred + b_p * eps


@torch.no_grad()
def ddim_sample(model: Callable, cond: ConditioningBundle, sched: NoiseSchedule, steps: int = 50,
                cfg_scale: float = 7.5, seed: int = 0, null_text: torch.Tensor | None = None,
                callback: Callable | None = None) -> torch.Tensor:
    """Sample a clean latent with shape ``cond.masked_latent.shape``.

    Each step evaluates the model under full conditions and under null text plus a
    black sketch (the masked-image branch stays on in both), then mixes them with
    :func:`cfg_combine`. At ``cfg_scale == 1`` the null pass is skipped, which leaves
    the trajectory unchanged.
    """
    ts = ddim_timesteps(sched.T, steps)
    ref = cond.masked_latent
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(ref.shape, generator=gen, dtype=torch.float64).to(ref.dtype)
    b = cond.batch_size
    if cfg_scale != 1:
        if null_text is None:
            null_text = model.null_text_embedding()
        both = cond.cat(cond.nulled(True, True, null_text))
    for t, t_prev in zip(ts[:-1], ts[1:]):
        tb = torch.full((b,), int(t), dtype=torch.long)
        if cfg_scale == 1:
            eps = model(z, tb, cond)
        else:
            out = model(torch.cat([z, z]), torch.cat([tb, tb]), both)
            eps = cfg_combine(out[b:], out[:b], cfg_scale)
        z = ddim_step(z, eps, int(t), int(t_prev), sched)
        if callback is not None:
            callback(int(t_prev), z)
    return z
