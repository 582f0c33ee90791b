"""Mask decoding, instance extraction, and per-image meta record assembly.

Input is a JSONL manifest, one object per image:

    {"image_id": ..., "image": path, "mask": path or [paths],
     "case_id": ..., "modality": ..., "scanned_region": ...,
     "orientation": ..., "width": int, "height": int,
     "categories": [{"id": int, "name": str}, ...]}

Mask files are single-channel 8- or 16-bit label images whose pixel value
is the category id, 0 being background.  When several mask paths are
given they are merged in order, later nonzero pixels winning.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import NormBox, PixelBox, normalize_box

MODALITIES = ("CT", "MR", "X-ray", "PET", "Endoscopy", "Dermoscopy", "Fundus", "Ultrasound")
_MODALITY_BY_FOLD = {name.casefold(): name for name in MODALITIES}

DEFAULT_CONNECTIVITY = 8
DEFAULT_MIN_AREA = 10


class MissingFileError(FileNotFoundError):
    pass


class DimensionMismatchError(ValueError):
    pass


class UnknownCategoryIdError(ValueError):
    pass


class UnknownModalityError(ValueError):
    pass


@dataclass
class ManifestEntry:
    image_id: str
    image: str
    masks: list[str]
    case_id: str
    modality: str
    scanned_region: str
    orientation: str
    width: int
    height: int
    categories: dict[int, str]

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "ManifestEntry":
        mask = obj["mask"]
        masks = [mask] if isinstance(mask, str) else list(mask)
        categories = {int(c["id"]): str(c["name"]) for c in obj["categories"]}
        return cls(
            image_id=str(obj["image_id"]),
            image=str(obj.get("image", "")),
            masks=masks,
            case_id=str(obj["case_id"]),
            modality=str(obj["modality"]),
            scanned_region=str(obj.get("scanned_region", "")),
            orientation=str(obj.get("orientation", "")),
            width=int(obj["width"]),
            height=int(obj["height"]),
            categories=categories,
        )


@dataclass
class LabelMask:
    width: int
    height: int
    labels: np.ndarray  # (height, width) integer grid, 0 = background
    palette: dict[int, str]

    def category_ids(self) -> list[int]:
        return sorted(int(v) for v in np.unique(self.labels) if v != 0)


@dataclass(frozen=True)
class InstanceRecord:
    category: str
    area: int
    box: PixelBox
    component_id: int


@dataclass
class MetaRecord:
    image_id: str
    case_id: str
    modality: str
    scanned_region: str
    orientation: str
    width: int
    height: int
    objects: list[tuple[str, NormBox]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "case_id": self.case_id,
            "modality": self.modality,
            "scanned_region": self.scanned_region,
            "orientation": self.orientation,
            "width": self.width,
            "height": self.height,
            "objects": [
                {"category": cat, "box": list(box.as_tuple())} for cat, box in self.objects
            ],
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "MetaRecord":
        objects = [(o["category"], NormBox(*o["box"])) for o in obj.get("objects", [])]
        return cls(
            image_id=obj["image_id"],
            case_id=obj["case_id"],
            modality=obj["modality"],
            scanned_region=obj.get("scanned_region", ""),
            orientation=obj.get("orientation", ""),
            width=int(obj["width"]),
            height=int(obj["height"]),
            objects=objects,
        )


def resolve_modality(raw: str, modality_map: dict[str, str] | None = None) -> str:
    """Case-folded match against the closed 8-modality set, plus optional aliases."""
    fold = raw.strip().casefold()
    if modality_map:
        alias = {k.casefold(): v for k, v in modality_map.items()}.get(fold)
        if alias is not None:
            fold = alias.casefold()
    name = _MODALITY_BY_FOLD.get(fold)
    if name is None:
        raise UnknownModalityError(f"modality {raw!r} not in {MODALITIES}")
    return name


def _decode_label_image(path: Path, width: int, height: int) -> np.ndarray:
    if not path.exists():
        raise MissingFileError(f"mask file not found: {path}")
    with Image.open(path) as img:
        if img.mode not in ("L", "P", "I", "I;16"):
            raise DimensionMismatchError(
                f"{path}: mode {img.mode} is not a single-channel label image"
            )
        arr = np.asarray(img, dtype=np.int64)
    if arr.ndim != 2:
        raise DimensionMismatchError(f"{path}: expected 2-D labels, got shape {arr.shape}")
    if arr.shape != (height, width):
        raise DimensionMismatchError(
            f"{path}: mask is {arr.shape[1]}x{arr.shape[0]}, manifest says {width}x{height}"
        )
    return arr


def load_mask(entry: ManifestEntry, root: Path | None = None) -> LabelMask:
    """Decode the entry's mask file(s) and join the manifest category table."""
    base = root or Path(".")
    merged: np.ndarray | None = None
    for rel in entry.masks:
        arr = _decode_label_image(base / rel, entry.width, entry.height)
        if merged is None:
            merged = arr
        else:
            merged = np.where(arr != 0, arr, merged)
    if merged is None:
        raise MissingFileError(f"{entry.image_id}: manifest lists no mask file")
    present = {int(v) for v in np.unique(merged) if v != 0}
    unknown = present - set(entry.categories)
    if unknown:
        raise UnknownCategoryIdError(
            f"{entry.image_id}: mask ids {sorted(unknown)} missing from category table"
        )
    palette = {cid: entry.categories[cid] for cid in sorted(present)}
    return LabelMask(entry.width, entry.height, merged, palette)


def extract_instances(
    mask: LabelMask,
    connectivity: int = DEFAULT_CONNECTIVITY,
    min_area: int = DEFAULT_MIN_AREA,
    merge_per_category: bool = False,
) -> list[InstanceRecord]:
    """Connected components of each nonzero category, tight boxes, area filter.

    Output order is canonical: ascending category id, then first-pixel
    raster order within the category.  With ``merge_per_category`` each
    category yields a single union box over its surviving components.
    """
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = np.ones((3, 3), dtype=bool) if connectivity == 8 else None
    records: list[InstanceRecord] = []
    for cid in mask.category_ids():
        binary = mask.labels == cid
        labeled, count = ndimage.label(binary, structure=structure)
        if count == 0:
            continue
        areas = np.bincount(labeled.ravel())
        slices = ndimage.find_objects(labeled)
        flat = labeled.ravel()
        first_seen = np.full(count + 1, flat.size, dtype=np.int64)
        comp_ids, first_idx = np.unique(flat, return_index=True)
        first_seen[comp_ids] = first_idx
        order = sorted(
            (comp for comp in range(1, count + 1) if areas[comp] >= min_area),
            key=lambda comp: first_seen[comp],
        )
        category = mask.palette[cid]
        kept: list[InstanceRecord] = []
        for ordinal, comp in enumerate(order):
            ysl, xsl = slices[comp - 1]
            box = PixelBox(xsl.start, ysl.start, xsl.stop - 1, ysl.stop - 1)
            kept.append(InstanceRecord(category, int(areas[comp]), box, ordinal))
        if merge_per_category and kept:
            union = PixelBox(
                min(r.box.x0 for r in kept),
                min(r.box.y0 for r in kept),
                max(r.box.x1 for r in kept),
                max(r.box.y1 for r in kept),
            )
            kept = [InstanceRecord(category, sum(r.area for r in kept), union, 0)]
        records.extend(kept)
    return records


def build_meta(
    entry: ManifestEntry,
    instances: Iterable[InstanceRecord],
    modality_map: dict[str, str] | None = None,
) -> MetaRecord:
    modality = resolve_modality(entry.modality, modality_map)
    objects = [
        (inst.category, normalize_box(inst.box, entry.width, entry.height))
        for inst in instances
    ]
    return MetaRecord(
        image_id=entry.image_id,
        case_id=entry.case_id,
        modality=modality,
        scanned_region=entry.scanned_region,
        orientation=entry.orientation,
        width=entry.width,
        height=entry.height,
        objects=objects,
    )


def ingest_image(
    entry: ManifestEntry,
    root: Path | None = None,
    connectivity: int = DEFAULT_CONNECTIVITY,
    min_area: int = DEFAULT_MIN_AREA,
    merge_per_category: bool = False,
    modality_map: dict[str, str] | None = None,
) -> MetaRecord:
    """Full per-image pipeline: decode mask, extract instances, assemble meta."""
    mask = load_mask(entry, root)
    instances = extract_instances(mask, connectivity, min_area, merge_per_category)
    return build_meta(entry, instances, modality_map)


def read_manifest(path: Path) -> Iterator[ManifestEntry]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield ManifestEntry.from_json(json.loads(line))


def read_metas(path: Path) -> Iterator[MetaRecord]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield MetaRecord.from_json(json.loads(line))


def write_metas(metas: Iterable[MetaRecord], path: Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for meta in metas:
            fh.write(json.dumps(meta.to_json(), ensure_ascii=False) + "\n")
            count += 1
    return count
