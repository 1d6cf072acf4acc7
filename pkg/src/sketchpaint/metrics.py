"""Local image metrics (masked L2, PSNR, SSIM) and a registry for external perceptual scores.

Images are float arrays in [0, 1], HxW or HxWxC. ``pm`` is the visible-pixel mask
(1 = kept); region metrics only look at pixels where ``pm == 0``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ShapeError

PSNR_INF = "inf"
EXTERNAL_SLOTS = ("as", "clip", "fid", "lpips")
SSIM_WINDOW = 11
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2

_plugins: Dict[str, Callable] = {}


def register_metric(name: str, fn: Callable):
    """Attach an external metric. ``fn(prediction, target, pm) -> float``."""
    _plugins[name] = fn


def unregister_metric(name: str):
    _plugins.pop(name, None)


def registered_metrics():
    return sorted(_plugins)


def _region(pred, target, pm):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if pm is None:
        sel = np.ones(pred.shape[:2], dtype=bool)
    else:
        pm = np.asarray(pm)
        if pm.shape != pred.shape[:2]:
            raise ShapeError(f"mask {pm.shape} vs image {pred.shape[:2]}")
        sel = pm < 0.5
    return pred, target, sel


def masked_l2(pred, target, pm=None) -> float:
    """Mean squared error over corrupted pixels (all pixels when ``pm`` is None)."""
    pred, target, sel = _region(pred, target, pm)
    if not sel.any():
        return 0.0
    return float(np.mean((pred - target)[sel] ** 2))


def psnr(pred, target, pm=None):
    """PSNR in dB for unit-range images; the string ``"inf"`` when the error is exactly zero."""
    mse = masked_l2(pred, target, pm)
    if mse == 0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> np.ndarray:
    """Per-pixel SSIM for a single channel, uniform window, reflect padding, population moments."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    f = lambda x: uniform_filter(x, size=window, mode="reflect")
    mu_a, mu_b = f(a), f(b)
    var_a = f(a * a) - mu_a ** 2
    var_b = f(b * b) - mu_b ** 2
    cov = f(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _C1) * (2 * cov + _C2)
    den = (mu_a ** 2 + mu_b ** 2 + _C1) * (var_a + var_b + _C2)
    return num / den


def ssim(pred, target, pm=None, window: int = SSIM_WINDOW) -> float:
    pred, target, sel = _region(pred, target, pm)
    if not sel.any():
        return 1.0
    if pred.ndim == 2:
        maps = ssim_map(pred, target, window)
    else:
        maps = np.mean([ssim_map(pred[..., c], target[..., c], window) for c in range(pred.shape[-1])], axis=0)
    return float(np.mean(maps[sel]))


@dataclass
class MetricsReport:
    id: str
    l2: float
    psnr: object
    ssim: float
    mode: str = "masked"
    external: Dict[str, Optional[float]] = field(default_factory=lambda: {k: None for k in EXTERNAL_SLOTS})

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def compute_metrics(sample_id: str, pred, target, pm, mode: str = "masked") -> MetricsReport:
    if mode not in ("masked", "whole"):
        raise ValueError(f"mode must be 'masked' or 'whole', got {mode!r}")
    region = pm if mode == "masked" else None
    report = MetricsReport(sample_id, masked_l2(pred, target, region), psnr(pred, target, region),
                           ssim(pred, target, region), mode)
    for name, fn in _plugins.items():
        report.external[name] = float(fn(pred, target, pm))
    return report


def summarize(reports) -> dict:
    """Aggregate record; PSNR averages finite values and counts exact matches separately."""
    reports = list(reports)
    if not reports:
        return {"summary": True, "count": 0}
    finite = [r.psnr for r in reports if r.psnr != PSNR_INF]
    return {
        "summary": True,
        "count": len(reports),
        "l2": float(np.mean([r.l2 for r in reports])),
        "psnr": float(np.mean(finite)) if finite else PSNR_INF,
        "psnr_exact": len(reports) - len(finite),
        "ssim": float(np.mean([r.ssim for r in reports])),
    }
