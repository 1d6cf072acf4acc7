"""Four-tuple construction and the line-delimited manifest."""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Tuple

import numpy as np

from ..errors import IngestionError
from .corpus import InstanceSample, load_png, save_png
from .masks import DIRECTIONS, bezier_partial_mask, mask_ladder
from .sketch import partial_sketch, sketch_generator

log = logging.getLogger(__name__)

# Order of keys in every manifest record.
MANIFEST_FIELDS = (
    "id", "image", "instance_mask", "sketch", "masked_image", "partial_mask", "partial_sketch",
    "caption", "d", "s", "direction", "sketch_type", "coverage", "seed", "fallback",
)


@dataclass
class DatagenConfig:
    D: int = 5
    S: int = 4
    coverage_range: Tuple[float, float] = (0.5, 0.6)
    sketch_types: Tuple[str, ...] = ("canny",)
    canny_low: float = 0.1
    canny_high: float = 0.3


@dataclass
class FourTuple:
    id: str
    masked_image: np.ndarray
    partial_mask: np.ndarray  # 1 = visible, 0 = corrupted
    partial_sketch: np.ndarray
    caption: str
    provenance: dict
    image: np.ndarray = None
    instance_mask: np.ndarray = None
    sketch: np.ndarray = None
    selected_mask: np.ndarray = None


def sample_rng(sample_id: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(sample_id.encode("utf-8"))])


def make_sketch(image, sketch_type: str, config: DatagenConfig) -> np.ndarray:
    if sketch_type == "canny":
        return sketch_generator("canny")(image, config.canny_low, config.canny_high)
    return np.asarray(sketch_generator(sketch_type)(image), dtype=np.float64)


def build_four_tuple(sample: InstanceSample, config: DatagenConfig = DatagenConfig(),
                     seed: int = 0) -> FourTuple:
    """Mask ladder pick, directional partial masking, then partial-sketch extraction.

    Pure function of (sample, config, seed).
    """
    rng = sample_rng(sample.id, seed)
    m0 = sample.m0
    ladder = mask_ladder(m0, config.D, config.S)
    d = int(rng.integers(0, config.D + 1))
    s = 0 if d == config.D else int(rng.integers(0, config.S + 1))
    selected = ladder.get(d, s)
    direction = DIRECTIONS[int(rng.integers(len(DIRECTIONS)))]
    target = float(rng.uniform(*config.coverage_range))
    pm, info = bezier_partial_mask(selected, direction, target, rng)
    sketch_type = config.sketch_types[int(rng.integers(len(config.sketch_types)))]
    sketch = make_sketch(sample.image, sketch_type, config)
    ps = partial_sketch(pm, m0, sketch)
    masked = sample.image * pm[..., None]
    provenance = {"d": d, "s": s, "direction": direction, "sketch_type": sketch_type,
                  "coverage": info["coverage"], "coverage_target": target, "seed": int(seed),
                  "fallback": info["fallback"]}
    return FourTuple(sample.id, masked, pm, ps, sample.caption, provenance,
                     image=sample.image, instance_mask=m0, sketch=sketch, selected_mask=selected)


def generate(samples: Iterable[InstanceSample], config: DatagenConfig = DatagenConfig(),
             seed: int = 0) -> Iterator[FourTuple]:
    for sample in samples:
        try:
            yield build_four_tuple(sample, config, seed)
        except ValueError as exc:
            log.warning("skipping %s: %s", sample.id, exc)


def write_dataset(tuples: Iterable[FourTuple], out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Write per-sample PNGs and a JSON-lines manifest with paths relative to ``out_dir``."""
    out = Path(out_dir)
    for sub in ("images", "masks", "sketches", "masked", "partial_masks", "partial_sketches"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    manifest = out / manifest_name
    with open(manifest, "w", encoding="utf-8") as fh:
        for ft in tuples:
            paths = {
                "image": f"images/{ft.id}.png",
                "instance_mask": f"masks/{ft.id}.png",
                "sketch": f"sketches/{ft.id}.png",
                "masked_image": f"masked/{ft.id}.png",
                "partial_mask": f"partial_masks/{ft.id}.png",
                "partial_sketch": f"partial_sketches/{ft.id}.png",
            }
            save_png(out / paths["image"], ft.image)
            save_png(out / paths["instance_mask"], ft.instance_mask.astype(bool))
            save_png(out / paths["sketch"], ft.sketch)
            save_png(out / paths["masked_image"], ft.masked_image)
            save_png(out / paths["partial_mask"], ft.partial_mask.astype(bool))
            save_png(out / paths["partial_sketch"], ft.partial_sketch)
            record = {"id": ft.id, **paths, "caption": ft.caption,
                      **{k: ft.provenance[k] for k in MANIFEST_FIELDS if k in ft.provenance}}
            fh.write(json.dumps({k: record[k] for k in MANIFEST_FIELDS}, ensure_ascii=False) + "\n")
    return manifest


@dataclass
class ManifestRecord:
    id: str
    caption: str
    paths: dict
    provenance: dict
    root: Path

    def load(self, key: str) -> np.ndarray:
        mask = key in ("instance_mask", "partial_mask")
        arr = load_png(self.root / self.paths[key], mask=mask)
        if key in ("sketch", "partial_sketch"):
            arr = arr[..., 0]
        return arr


def read_manifest(path) -> List[ManifestRecord]:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(raw, dict):
                raise IngestionError("record is not an object", lineno)
            missing = [k for k in ("id", "caption", "image", "instance_mask", "partial_mask") if k not in raw]
            if missing:
                raise IngestionError(f"missing fields {missing}", lineno)
            paths = {k: raw[k] for k in MANIFEST_FIELDS[1:7] if k in raw}
            prov = {k: raw[k] for k in MANIFEST_FIELDS[8:] if k in raw}
            records.append(ManifestRecord(raw["id"], raw["caption"], paths, prov, path.parent))
    return records
