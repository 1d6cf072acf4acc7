"""Export channel-averaged SBFI intermediates as grayscale PNGs for inspection.

Unsigned maps (n_hat, s, x, sn_hat) share one affine range so that two of them can be
compared pixel for pixel. ``vm`` is already in [0, 1] and maps straight to [0, 255].
Signed maps (x_hat, vm_gamma, vm_beta) are written as a positive part ``<name>.png`` and
a negative part ``<name>_neg.png``, both zero for an untrained model. The x_hat map is
stored as the quantized difference of the exported sn_hat and n_hat maps, so those three
files agree exactly. Raw float maps and the scales go into ``maps.npz`` and ``scales.json``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .datagen.corpus import save_png
from .diffusion import ConditioningBundle, build_schedule, forward_diffuse
from .mie import downsample_mask
from .train import to_image_tensor

FEATURE_NAMES = ("n_hat", "s", "x", "vm", "vm_gamma", "vm_beta", "x_hat", "sn_hat")


def channel_mean(t: torch.Tensor) -> np.ndarray:
    return t[0].mean(0).detach().to(torch.float64).numpy()


def _quantize(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)


def _signed(a: np.ndarray, scale: float):
    if scale <= 0:
        z = np.zeros(a.shape, dtype=np.uint8)
        return z, z
    return _quantize(a / scale), _quantize(-a / scale)


@torch.no_grad()
def capture_records(model, vae, image, pm, sketch, caption: str, t: int = 500, seed: int = 0, sched=None):
    """Run one denoiser call on a noised latent of ``image`` and return per-scale SBFI records."""
    sched = sched or build_schedule()
    img = to_image_tensor(image)
    pm_t = to_image_tensor(np.asarray(pm, dtype=np.float32))
    sk = to_image_tensor(np.asarray(sketch, dtype=np.float32))
    z0 = vae.encode(img)
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64).to(z0.dtype)
    tt = torch.tensor([t])
    cond = ConditioningBundle(model.encode_text([caption]), vae.encode(img * pm_t), downsample_mask(pm_t), sk)
    records = []
    model(forward_diffuse(z0, tt, eps, sched), tt, cond, records=records)
    return records


def export_record(rec: dict, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps = {k: channel_mean(rec[k]) for k in FEATURE_NAMES}
    pair = np.concatenate([maps["n_hat"].ravel(), maps["sn_hat"].ravel(), maps["x"].ravel()])
    lo, span = float(pair.min()), float(pair.max() - pair.min()) or 1.0
    s_lo, s_span = float(maps["s"].min()), float(np.ptp(maps["s"])) or 1.0
    q = {
        "n_hat": _quantize((maps["n_hat"] - lo) / span),
        "sn_hat": _quantize((maps["sn_hat"] - lo) / span),
        "x": _quantize((maps["x"] - lo) / span),
        "s": _quantize((maps["s"] - s_lo) / s_span),
        "vm": _quantize(maps["vm"]),
    }
    diff = q["sn_hat"].astype(np.int16) - q["n_hat"].astype(np.int16)
    q["x_hat"], q["x_hat_neg"] = np.clip(diff, 0, 255).astype(np.uint8), np.clip(-diff, 0, 255).astype(np.uint8)
    scales = {"offset": lo, "span": span, "s_offset": s_lo, "s_span": s_span}
    for name in ("vm_gamma", "vm_beta"):
        scale = float(np.abs(maps[name]).max())
        q[name], q[name + "_neg"] = _signed(maps[name], scale)
        scales[name] = scale
    for name, arr in q.items():
        save_png(out / f"{name}.png", arr)
    np.savez(out / "maps.npz", **maps)
    (out / "scales.json").write_text(json.dumps(scales, indent=2, sort_keys=True), encoding="utf-8")
    return q


def dump_features(model, vae, image, pm, sketch, caption: str, out_dir, scale: int = 1, t: int = 500,
                  seed: int = 0, sched=None) -> dict:
    """Write the maps for one encoder scale (1-based). Returns the exported uint8 arrays."""
    records = capture_records(model, vae, image, pm, sketch, caption, t, seed, sched)
    if not 1 <= scale <= len(records):
        raise ValueError(f"scale must be in 1..{len(records)}, got {scale}")
    return export_record(records[scale - 1], out_dir)
