"""Synthetic instance-mask corpus and on-disk corpus I/O."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import cv2
import numpy as np
from PIL import Image

from ..errors import IngestionError

log = logging.getLogger(__name__)

COLORS = {
    "red": (0.85, 0.15, 0.12),
    "orange": (0.95, 0.55, 0.10),
    "yellow": (0.95, 0.85, 0.15),
    "green": (0.20, 0.70, 0.25),
    "blue": (0.15, 0.35, 0.85),
    "purple": (0.55, 0.20, 0.70),
    "black": (0.08, 0.08, 0.08),
    "white": (0.95, 0.95, 0.95),
}
BACKGROUNDS = {
    "grassy": (0.45, 0.60, 0.35),
    "sandy": (0.80, 0.72, 0.52),
    "cloudy": (0.65, 0.72, 0.82),
    "stony": (0.50, 0.50, 0.50),
}
SHAPES = ("ellipse", "polygon", "bird")


@dataclass
class InstanceSample:
    """One annotated image: HxWx3 float image in [0,1], HxW binary instance mask."""

    id: str
    image: np.ndarray
    m0: np.ndarray
    caption: str
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.m0 = np.asarray(self.m0).astype(bool)
        if not self.m0.any():
            raise ValueError(f"sample {self.id}: instance mask is empty")


def _background(canvas: int, base, rng) -> np.ndarray:
    noise = rng.standard_normal((canvas // 16 + 1, canvas // 16 + 1))
    noise = cv2.resize(noise, (canvas, canvas), interpolation=cv2.INTER_CUBIC)
    yy, xx = np.mgrid[:canvas, :canvas]
    theta, freq = rng.uniform(0, np.pi), rng.uniform(0.05, 0.15)
    stripes = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)))
    tex = 0.06 * noise + 0.03 * stripes
    return np.clip(np.asarray(base)[None, None] + tex[..., None], 0, 1)


def _draw_shape(kind: str, canvas: int, rng, facing: str):
    """Rasterize the object; returns (mask, detail-mask) as uint8 arrays."""
    mask = np.zeros((canvas, canvas), np.uint8)
    detail = np.zeros_like(mask)
    c = canvas
    cx, cy = rng.uniform(0.35, 0.65) * c, rng.uniform(0.35, 0.65) * c
    sign = 1 if facing == "right" else -1
    if kind == "ellipse":
        ax, ay = rng.uniform(0.16, 0.3) * c, rng.uniform(0.12, 0.24) * c
        ang = rng.uniform(0, 180)
        cv2.ellipse(mask, (int(cx), int(cy)), (int(ax), int(ay)), ang, 0, 360, 1, -1)
        cv2.ellipse(detail, (int(cx), int(cy)), (int(ax * 0.5), int(ay * 0.5)), ang, 0, 360, 1, 2)
    elif kind == "polygon":
        n = rng.integers(5, 9)
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        radii = rng.uniform(0.15, 0.3, n) * c
        pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], 1).astype(np.int32)
        cv2.fillPoly(mask, [pts], 1)
        cv2.line(detail, tuple(pts[0]), tuple(pts[n // 2]), 1, 2)
    else:
        bx, by = rng.uniform(0.16, 0.24) * c, rng.uniform(0.1, 0.15) * c
        cv2.ellipse(mask, (int(cx), int(cy)), (int(bx), int(by)), 0, 0, 360, 1, -1)
        hx, hy, hr = cx + sign * bx * 0.95, cy - by * 0.9, by * 0.7
        cv2.circle(mask, (int(hx), int(hy)), int(hr), 1, -1)
        beak = np.array([[hx + sign * hr * 0.8, hy - hr * 0.3], [hx + sign * hr * 1.8, hy],
                         [hx + sign * hr * 0.8, hy + hr * 0.3]], np.int32)
        cv2.fillPoly(mask, [beak], 1)
        tail = np.array([[cx - sign * bx * 0.8, cy], [cx - sign * bx * 1.5, cy - by * 0.9],
                         [cx - sign * bx * 1.5, cy + by * 0.3]], np.int32)
        cv2.fillPoly(mask, [tail], 1)
        cv2.ellipse(detail, (int(cx - sign * bx * 0.1), int(cy)), (int(bx * 0.6), int(by * 0.5)),
                    0, 180 if sign > 0 else 0, 360 if sign > 0 else 180, 1, 2)
        cv2.circle(detail, (int(hx + sign * hr * 0.3), int(hy - hr * 0.2)), max(1, int(hr * 0.2)), 1, -1)
    return mask.astype(bool), detail.astype(bool) & mask.astype(bool)


def synth_sample(index: int, canvas: int, rng: np.random.Generator) -> InstanceSample:
    kind = SHAPES[rng.integers(len(SHAPES))]
    color = list(COLORS)[rng.integers(len(COLORS))]
    bg = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
    facing = ("left", "right")[rng.integers(2)]
    mask, detail = _draw_shape(kind, canvas, rng, facing)
    if not mask.any():  # degenerate draw, fall back to a centered disc
        cv2.circle(mask.view(np.uint8), (canvas // 2, canvas // 2), canvas // 5, 1, -1)
    image = _background(canvas, BACKGROUNDS[bg], rng)
    rgb = np.asarray(COLORS[color])
    yy = np.linspace(1.05, 0.9, canvas)[:, None, None]
    obj = np.clip(rgb[None, None] * yy, 0, 1)
    accent = np.clip(1.0 - rgb, 0, 1) * 0.6 + rgb * 0.4
    image = np.where(mask[..., None], obj, image)
    image = np.where(detail[..., None], accent[None, None], image)
    size = "large" if mask.mean() > 0.12 else "small"
    caption = f"a {size} {color} {kind} facing {facing} on a {bg} background"
    attrs = {"shape": kind, "color": color, "background": bg, "facing": facing, "size": size}
    return InstanceSample(f"synth_{index:05d}", image.astype(np.float32), mask, caption, attrs)


def synth_corpus(n: int, canvas: int = 128, rng: np.random.Generator | int = 0) -> List[InstanceSample]:
    """``n`` images each holding one primitive object with an exact instance mask."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return [synth_sample(i, canvas, rng) for i in range(n)]


def save_png(path: Path, array: np.ndarray):
    """Write a [0,1] float image or a boolean mask as 8-bit PNG."""
    a = np.asarray(array)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    elif a.dtype != np.uint8:
        a = np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(a).save(path, format="PNG")


def load_png(path: Path, mask: bool = False) -> np.ndarray:
    a = np.asarray(Image.open(path))
    if mask:
        if a.ndim == 3:
            a = a[..., 0]
        return a > 127
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    return a[..., :3].astype(np.float32) / 255.0


def write_corpus(samples: List[InstanceSample], root) -> Path:
    """Lay out ``images/<id>.png``, ``masks/<id>.png`` and ``captions.txt`` (id TAB caption)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "captions.txt", "w", encoding="utf-8") as fh:
        for s in samples:
            save_png(root / "images" / f"{s.id}.png", s.image)
            save_png(root / "masks" / f"{s.id}.png", s.m0)
            fh.write(f"{s.id}\t{s.caption}\n")
    return root


def read_corpus(root) -> List[InstanceSample]:
    root = Path(root)
    captions = root / "captions.txt"
    if not captions.exists():
        raise IngestionError(f"{captions} not found")
    samples = []
    with open(captions, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise IngestionError("expected 'id<TAB>caption'", lineno)
            sid, caption = line.split("\t", 1)
            img, msk = root / "images" / f"{sid}.png", root / "masks" / f"{sid}.png"
            if not img.exists() or not msk.exists():
                raise IngestionError(f"missing image or mask for {sid!r}", lineno)
            m0 = load_png(msk, mask=True)
            if not m0.any():
                log.warning("skipping %s: empty instance mask", sid)
                continue
            samples.append(InstanceSample(sid, load_png(img), m0, caption))
    return samples
