"""Deterministic synthetic corpus: geometric shapes stand in for organs.

Generates label masks, grayscale preview images, and a JSONL manifest
covering all eight modality labels, so the full pipeline and the test
suite run without any real medical data.  Everything derives from the
SplitMix64 stream, so one seed always produces the same bytes.  Slices
within a case share jittered copies of the same shapes, mimicking the
adjacent-slice redundancy of sliced 3-D volumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .split import SplitStream, fnv1a64

MODALITY_PROFILES = {
    "CT": ("abdomen", "axial", ["liver", "kidney", "spleen"]),
    "MR": ("brain", "axial", ["tumor", "edema"]),
    "X-ray": ("chest", "frontal", ["lung", "heart"]),
    "PET": ("whole body", "coronal", ["lesion"]),
    "Endoscopy": ("colon", "endoluminal", ["polyp", "ulcer"]),
    "Dermoscopy": ("skin", "surface", ["melanoma"]),
    "Fundus": ("retina", "en face", ["optic disc", "hemorrhage"]),
    "Ultrasound": ("abdomen", "sagittal", ["gallbladder", "cyst"]),
}


@dataclass
class SynthConfig:
    out_dir: Path
    seed: int = 0
    cases_per_modality: int = 3
    slices_per_case: int = 4
    size: int = 64


@dataclass
class _Shape:
    category_id: int
    x: int
    y: int
    w: int
    h: int
    ellipse: bool


def _stamp(labels: np.ndarray, shape: _Shape, size: int, dx: int, dy: int) -> None:
    x = min(max(shape.x + dx, 0), size - shape.w)
    y = min(max(shape.y + dy, 0), size - shape.h)
    if shape.ellipse:
        cy, cx = y + shape.h / 2.0, x + shape.w / 2.0
        yy, xx = np.ogrid[:size, :size]
        inside = ((xx - cx) / (shape.w / 2.0)) ** 2 + ((yy - cy) / (shape.h / 2.0)) ** 2 <= 1.0
        labels[inside] = shape.category_id
    else:
        labels[y : y + shape.h, x : x + shape.w] = shape.category_id


def generate_corpus(config: SynthConfig) -> dict:
    """Write masks/, images/, and manifest.jsonl under config.out_dir."""
    out = Path(config.out_dir)
    size = config.size
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    counts = {"images": 0, "cases": 0, "per_modality": {}}
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for modality, (region, orientation, categories) in MODALITY_PROFILES.items():
            slug = modality.lower().replace("-", "")
            for case_idx in range(config.cases_per_modality):
                case_id = f"{slug}_case{case_idx:03d}"
                counts["cases"] += 1
                stream = SplitStream(config.seed ^ fnv1a64(case_id))
                shapes = []
                n_shapes = 1 + stream.below(len(categories))
                for cid in range(1, n_shapes + 1):
                    w = 8 + stream.below(size // 3)
                    h = 8 + stream.below(size // 3)
                    shapes.append(
                        _Shape(
                            category_id=cid,
                            x=stream.below(size - w),
                            y=stream.below(size - h),
                            w=w,
                            h=h,
                            ellipse=stream.below(2) == 1,
                        )
                    )
                for slice_idx in range(config.slices_per_case):
                    image_id = f"{case_id}_s{slice_idx:02d}"
                    # small per-slice jitter: neighbours stay highly redundant
                    dx = stream.below(5) - 2
                    dy = stream.below(5) - 2
                    labels = np.zeros((size, size), dtype=np.uint8)
                    for shape in shapes:
                        _stamp(labels, shape, size, dx, dy)
                    mask_rel = f"masks/{image_id}.png"
                    image_rel = f"images/{image_id}.png"
                    Image.fromarray(labels, mode="L").save(out / mask_rel)
                    preview = (labels.astype(np.uint16) * 60 % 256).astype(np.uint8)
                    Image.fromarray(preview, mode="L").save(out / image_rel)
                    entry = {
                        "image_id": image_id,
                        "image": image_rel,
                        "mask": mask_rel,
                        "case_id": case_id,
                        "modality": modality,
                        "scanned_region": region,
                        "orientation": orientation,
                        "width": size,
                        "height": size,
                        "categories": [
                            {"id": i + 1, "name": name} for i, name in enumerate(categories)
                        ],
                    }
                    fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
                    counts["images"] += 1
                    counts["per_modality"][modality] = counts["per_modality"].get(modality, 0) + 1
    return counts
