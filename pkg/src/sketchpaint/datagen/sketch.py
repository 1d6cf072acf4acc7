"""Canny edge sketches, the sketch-generator registry and partial-sketch masking."""
from __future__ import annotations

from typing import Callable, Dict

import numpy as np
from scipy import ndimage

from ..errors import ParameterError, ShapeError

LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image[..., :3] @ LUMA
    return image


def gradients(image, sigma: float = 1.0):
    """Gaussian-smoothed Sobel derivatives (gx along columns, gy along rows)."""
    g = to_gray(image)
    if sigma > 0:
        g = ndimage.gaussian_filter(g, sigma, mode="nearest")
    gx = ndimage.sobel(g, axis=1, mode="nearest")
    gy = ndimage.sobel(g, axis=0, mode="nearest")
    return gx, gy


def non_maximum_suppression(mag, gx, gy) -> np.ndarray:
    """Keep pixels that peak along the quantized gradient direction.

    Ties break toward the first neighbour (>= on one side, > on the other), so a
    symmetric ridge two pixels wide thins to one.
    """
    angle = (np.rad2deg(np.arctan2(gy, gx)) + 180.0) % 180.0
    p = np.pad(mag, 1)
    h, w = mag.shape

    def shifted(dy, dx):
        return p[1 + dy:h + 1 + dy, 1 + dx:w + 1 + dx]

    out = np.zeros_like(mag)
    bins = [
        ((angle < 22.5) | (angle >= 157.5), (0, -1), (0, 1)),
        ((angle >= 22.5) & (angle < 67.5), (-1, -1), (1, 1)),
        ((angle >= 67.5) & (angle < 112.5), (-1, 0), (1, 0)),
        ((angle >= 112.5) & (angle < 157.5), (-1, 1), (1, -1)),
    ]
    for sel, a, b in bins:
        keep = sel & (mag >= shifted(*a)) & (mag > shifted(*b))
        out[keep] = mag[keep]
    return out


def hysteresis(nms, low: float, high: float) -> np.ndarray:
    weak = nms >= low
    strong = nms >= high
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros_like(weak)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


def canny_sketch(image, low: float = 0.1, high: float = 0.3, sigma: float = 1.0) -> np.ndarray:
    """Binary Canny edge map (float 0/1). Thresholds are fractions of the peak gradient."""
    if not 0 <= low < high:
        raise ParameterError(f"need 0 <= low < high, got {low}, {high}")
    gx, gy = gradients(image, sigma)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-12:
        return np.zeros(mag.shape)
    nms = non_maximum_suppression(mag, gx, gy)
    return hysteresis(nms, low * peak, high * peak).astype(np.float64)


SketchGenerator = Callable[[np.ndarray], np.ndarray]
_GENERATORS: Dict[str, SketchGenerator] = {"canny": canny_sketch}


def register_sketch_generator(name: str, fn: SketchGenerator, overwrite: bool = False):
    """Add a named sketch extractor (image HxWx3 in [0,1] -> HxW in [0,1])."""
    if name in _GENERATORS and not overwrite:
        raise ParameterError(f"sketch generator {name!r} already registered")
    _GENERATORS[name] = fn


def sketch_generator(name: str) -> SketchGenerator:
    try:
        return _GENERATORS[name]
    except KeyError:
        raise ParameterError(f"unknown sketch generator {name!r}; have {sorted(_GENERATORS)}") from None


def available_sketch_generators():
    return sorted(_GENERATORS)


def partial_sketch(pm, m0, s) -> np.ndarray:
    """(1 - pm) * m0 * s: the sketch restricted to the corrupted part of the object."""
    pm, m0, s = (np.asarray(a, dtype=np.float64) for a in (pm, m0, s))
    if not pm.shape == m0.shape == s.shape:
        raise ShapeError(f"shapes differ: {pm.shape}, {m0.shape}, {s.shape}")
    return (1.0 - pm) * m0 * s
