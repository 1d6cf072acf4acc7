"""Mask ladder (dilation + blur blending) and directional Bezier partial masking."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import cv2
import numpy as np
from scipy import ndimage

from ..errors import ParameterError, ShapeError

DIRECTIONS = ("R2L", "L2R", "D2U", "U2D")


def _binary(m, name="mask") -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m.astype(bool)


def bounding_box(m0) -> Tuple[int, int, int, int]:
    """(top, bottom, left, right), inclusive."""
    ys, xs = np.nonzero(m0)
    if len(ys) == 0:
        raise ValueError("mask is empty")
    return ys.min(), ys.max(), xs.min(), xs.max()


def bbox_mask(m0) -> np.ndarray:
    top, bottom, left, right = bounding_box(m0)
    out = np.zeros(np.shape(m0), dtype=bool)
    out[top:bottom + 1, left:right + 1] = True
    return out


def bbox_gap(m0) -> int:
    """Largest chessboard distance from a bounding-box pixel to the nearest object pixel."""
    m0 = _binary(m0)
    dist = ndimage.distance_transform_cdt(~m0, metric="chessboard")
    return int(dist[bbox_mask(m0)].max())


def dilation_kernel(m0, d: int, D: int) -> int:
    return 1 + 2 * d * math.ceil(bbox_gap(m0) / D)


def dilate_mask(m0, d: int, D: int) -> np.ndarray:
    """Square dilation of side ``1 + 2 d ceil(r/D)`` clipped to the bounding box.

    ``r`` is the largest gap between the object and its bounding box, so ``d = D``
    fills the box and ``d = 0`` returns ``m0``.
    """
    m0 = _binary(m0, "m0")
    if not m0.any():
        raise ValueError("m0 is empty")
    if not (isinstance(d, (int, np.integer)) and 0 <= d <= D):
        raise ParameterError(f"d must be an integer in [0, {D}], got {d}")
    if d == 0:
        return m0.copy()
    k = dilation_kernel(m0, d, D)
    grown = cv2.dilate(m0.astype(np.uint8), np.ones((k, k), np.uint8), borderValue=0).astype(bool)
    return grown & bbox_mask(m0)


def blur_kernel(s: int) -> int:
    return 2 * s + 1


def blend_masks(m_d, m_d1, s: int, S: int, k_s: int | None = None) -> np.ndarray:
    """Blend two nested dilation levels with weight s/S, Gaussian-blur, threshold at 0.5.

    The endpoints skip the blur: s = 0 gives ``m_d`` and s = S gives ``m_d1`` exactly.
    """
    m_d, m_d1 = _binary(m_d, "m_d"), _binary(m_d1, "m_d1")
    if m_d.shape != m_d1.shape:
        raise ShapeError(f"{m_d.shape} vs {m_d1.shape}")
    if not (isinstance(S, (int, np.integer)) and S >= 1):
        raise ParameterError(f"S must be a positive integer, got {S}")
    if not (isinstance(s, (int, np.integer)) and 0 <= s <= S):
        raise ParameterError(f"s must be an integer in [0, {S}], got {s}")
    if (m_d & ~m_d1).any():
        raise ParameterError("m_d must be contained in m_d1")
    if s == 0:
        return m_d.copy()
    if s == S:
        return m_d1.copy()
    k_s = blur_kernel(s) if k_s is None else k_s
    if k_s < 1 or k_s % 2 == 0:
        raise ParameterError(f"k_s must be a positive odd integer, got {k_s}")
    alpha = s / S
    mix = alpha * m_d1.astype(np.float64) + (1 - alpha) * m_d.astype(np.float64)
    blurred = cv2.GaussianBlur(mix, (k_s, k_s), 0, borderType=cv2.BORDER_REPLICATE)
    return blurred > 0.5


@dataclass
class MaskLadder:
    """All masks m_{d,s}: dilation level d in [0, D] and blur level s in [0, S]."""

    D: int
    S: int
    dilated: List[np.ndarray]
    masks: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)

    def get(self, d: int, s: int) -> np.ndarray:
        if d == self.D and s == 0:
            return self.dilated[d]
        return self.masks[(d, s)]


def mask_ladder(m0, D: int = 5, S: int = 4) -> MaskLadder:
    dilated = [dilate_mask(m0, d, D) for d in range(D + 1)]
    ladder = MaskLadder(D, S, dilated)
    for d in range(D):
        for s in range(S + 1):
            ladder.masks[(d, s)] = blend_masks(dilated[d], dilated[d + 1], s, S)
    return ladder


def cubic_bezier(p0, p1, p2, p3, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return ((1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1 + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3)


def _to_canonical(a: np.ndarray, direction: str) -> np.ndarray:
    """View ``a`` so that the requested scan runs left to right along axis 1."""
    if direction == "L2R":
        return a
    if direction == "R2L":
        return a[:, ::-1]
    if direction == "U2D":
        return a.T
    if direction == "D2U":
        return a[::-1, :].T
    raise ParameterError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


def _from_canonical(a: np.ndarray, direction: str) -> np.ndarray:
    if direction == "L2R":
        return a
    if direction == "R2L":
        return a[:, ::-1]
    if direction == "U2D":
        return a.T
    return a.T[::-1, :]


def curve_front(height: int, width: int, rng: np.random.Generator, straight: bool = False):
    """Per-row lag of a random cubic Bezier front relative to its leading point.

    The curve runs from the top edge to the bottom edge with interior control points
    anywhere on the canvas. Returns (lag >= 0 per row, control points).
    """
    if straight:
        return np.zeros(height), None
    p0 = np.array([rng.uniform(0, width - 1), 0.0])
    p3 = np.array([rng.uniform(0, width - 1), height - 1.0])
    p1 = np.array([rng.uniform(0, width - 1), rng.uniform(0, height - 1)])
    p2 = np.array([rng.uniform(0, width - 1), rng.uniform(0, height - 1)])
    pts = cubic_bezier(p0, p1, p2, p3, 8 * (height + width))
    rows = np.clip(np.round(pts[:, 1]).astype(int), 0, height - 1)
    front = np.full(height, -np.inf)
    np.maximum.at(front, rows, pts[:, 0])
    seen = np.isfinite(front)
    front = np.interp(np.arange(height), np.nonzero(seen)[0], front[seen])
    return front.max() - front, np.stack([p0, p1, p2, p3])


def sweep_coverage(mask: np.ndarray, lag: np.ndarray, target: float):
    """Translate the front left to right one pixel at a time until coverage >= target.

    Each step adds at most one pixel per row; on the last step rows are admitted
    top to bottom and stop as soon as the target count is met, so the achieved
    coverage never exceeds the target by more than one pixel.
    Returns the swept region and the achieved coverage.
    """
    h, w = mask.shape
    area = int(mask.sum())
    need = math.ceil(target * area - 1e-9)
    lag_px = np.floor(lag).astype(int)
    cum = np.concatenate([np.zeros((h, 1), int), np.cumsum(mask, axis=1)], axis=1)
    offsets = np.arange(w + lag_px.max() + 1)
    cols = np.clip(offsets[:, None] - lag_px[None, :] + 1, 0, w)  # columns swept per row, per step
    covered = cum[np.arange(h)[None, :], cols]
    totals = covered.sum(axis=1)
    step = int(np.argmax(totals >= need))
    prev = cols[step - 1] if step > 0 else np.zeros(h, int)
    keep = cols[step].copy()
    count = int(totals[step - 1]) if step > 0 else 0
    for y in range(h):
        if keep[y] == prev[y]:
            continue
        if count >= need:
            keep[y] = prev[y]
            continue
        count += int(covered[step, y] - (covered[step - 1, y] if step > 0 else 0))
    swept = np.arange(w)[None, :] < keep[:, None]
    return swept, count / area


def bezier_partial_mask(mask, direction: str, coverage_target: float, rng: np.random.Generator,
                        straight: bool = False):
    """Directional Bezier scan of ``mask``; returns (pm, info).

    ``pm`` is 0 on the scanned part of the mask (the corrupted pixels) and 1 elsewhere.
    ``info`` records direction, achieved coverage, whether a straight front was used,
    and the curve control points in the scan frame.
    """
    mask = _binary(mask)
    if not mask.any():
        raise ValueError("mask is empty")
    if not 0.5 <= coverage_target <= 0.6:
        raise ParameterError(f"coverage_target must be in [0.5, 0.6], got {coverage_target}")
    canon = np.ascontiguousarray(_to_canonical(mask, direction))
    lag, ctrl = curve_front(*canon.shape, rng, straight)
    swept, coverage = sweep_coverage(canon, lag, coverage_target)
    fallback = False
    if coverage < coverage_target - 1e-12:
        swept, coverage = sweep_coverage(canon, np.zeros(canon.shape[0]), coverage_target)
        fallback = True
    corrupted = _from_canonical(swept & canon, direction)
    pm = (~corrupted).astype(np.uint8)
    info = {"direction": direction, "coverage": coverage, "straight": straight or fallback,
            "fallback": fallback, "control_points": None if ctrl is None else ctrl.tolist()}
    return np.ascontiguousarray(pm), info
