"""Bounding-box primitives shared by ingestion, markup, and metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass


class OutOfBoundsError(ValueError):
    """A pixel box does not fit inside its image."""


@dataclass(frozen=True)
class PixelBox:
    """Inclusive pixel-coordinate box, top-left origin."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        if not (0 <= self.x0 <= self.x1 and 0 <= self.y0 <= self.y1):
            raise ValueError(f"invalid pixel box {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def area(self) -> int:
        return (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)


@dataclass(frozen=True)
class NormBox:
    """Box with coordinates expressed as fractions of image width/height."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.x0 <= self.x1 <= 1.0 and 0.0 <= self.y0 <= self.y1 <= 1.0):
            raise ValueError(f"invalid normalized box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


def _round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


def normalize_box(box: PixelBox, width: int, height: int) -> NormBox:
    """Map a pixel box to [0,1] fractions, right/bottom edge exclusive.

    Divides by the full width/height with the far edge shifted by one pixel
    so that a full-frame box maps to exactly (0, 0, 1, 1).
    """
    if box.x1 >= width or box.y1 >= height:
        raise OutOfBoundsError(
            f"box {box.as_tuple()} exceeds image bounds {width}x{height}"
        )
    return NormBox(
        min(box.x0 / width, 1.0),
        min(box.y0 / height, 1.0),
        min((box.x1 + 1) / width, 1.0),
        min((box.y1 + 1) / height, 1.0),
    )


def denormalize_box(box: NormBox, width: int, height: int) -> PixelBox:
    """Inverse of :func:`normalize_box` back onto the pixel grid."""
    return PixelBox(
        _round_half_up(box.x0 * width),
        _round_half_up(box.y0 * height),
        _round_half_up(box.x1 * width) - 1,
        _round_half_up(box.y1 * height) - 1,
    )


def box_iou(a: NormBox, b: NormBox) -> float:
    """Intersection-over-union of two normalized boxes; 0 when the union is empty."""
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union
