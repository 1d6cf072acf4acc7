"""Run inference over a manifest and write per-sample metric records as JSON lines."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from .datagen.pipeline import read_manifest
from .diffusion import build_schedule
from .infer import infer
from .metrics import compute_metrics, summarize

log = logging.getLogger(__name__)


def schedule_for(checkpoint):
    cfg = checkpoint.config
    if cfg is None:
        return build_schedule()
    return build_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.schedule)


def evaluate(checkpoint, manifest, mode: str = "masked", out_path=None, steps: int = 50, cfg: float = 7.5,
             seed: int = 0, limit: Optional[int] = None, black_sketch: bool = False):
    """Returns ``(reports, summary)``. Samples whose ground-truth image cannot be read are skipped."""
    records = read_manifest(manifest)[:limit]
    sched = schedule_for(checkpoint)
    reports, skipped = [], 0
    for rec in records:
        try:
            target = rec.load("image")
            pm = rec.load("partial_mask").astype(np.float32)
            sketch = rec.load("partial_sketch")
        except (OSError, KeyError) as exc:
            log.warning("skipping %s: %s", rec.id, exc)
            skipped += 1
            continue
        if black_sketch:
            sketch = np.zeros_like(sketch)
        masked = target * pm[..., None]
        pred = infer(checkpoint.model, checkpoint.vae, masked, pm, sketch, rec.caption, steps, cfg, seed, sched)
        reports.append(compute_metrics(rec.id, pred, target, pm, mode))
    summary = summarize(reports)
    summary["skipped"] = skipped
    if out_path is not None:
        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8") as fh:
            for r in reports:
                fh.write(r.to_json() + "\n")
            fh.write(json.dumps(summary, sort_keys=True) + "\n")
    return reports, summary
