"""Shared builders for the test suite: seeded random documents, malformed
markup cases, tiny mask files, and quick meta records."""

from __future__ import annotations

import random
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

from gritforge.geometry import NormBox
from gritforge.ingest import MetaRecord
from gritforge.markup import MarkedText, QuantBox, Ref, Text, marked

SAFE_CHARS = "abcdefghijklmnopqrstuvwxyz0123456789 ,.()-"


def random_quant_box(rng: random.Random) -> QuantBox:
    x0, x1 = sorted(rng.randint(0, 1000) for _ in range(2))
    y0, y1 = sorted(rng.randint(0, 1000) for _ in range(2))
    return QuantBox(x0, y0, x1, y1)


def random_text(rng: random.Random, min_len: int = 1, max_len: int = 24) -> str:
    n = rng.randint(min_len, max_len)
    chars = [rng.choice(SAFE_CHARS) for _ in range(n)]
    # sprinkle lone angle brackets: legal text as long as no reserved token forms
    if rng.random() < 0.15:
        chars.insert(rng.randrange(len(chars) + 1), rng.choice("<>"))
    return "".join(chars)


def random_marked_text(rng: random.Random, max_segments: int = 6) -> MarkedText:
    segments = []
    want_text = rng.random() < 0.7
    for _ in range(rng.randint(0, max_segments)):
        if want_text:
            segments.append(Text(random_text(rng)))
        else:
            phrase = random_text(rng, 0, 12) if rng.random() < 0.9 else ""
            boxes = tuple(random_quant_box(rng) for _ in range(rng.randint(1, 3)))
            segments.append(Ref(phrase, boxes))
        want_text = not want_text if rng.random() < 0.8 else want_text
    return marked(*segments)


def malformed_corpus(rng: random.Random, count: int = 200) -> list[tuple[str, str]]:
    """(malformed string, expected strict issue kind) pairs.

    Each template is built so the intended violation is the first one a
    strict scan encounters.
    """

    def phrase() -> str:
        return "".join(rng.choice("abcdefghij ") for _ in range(rng.randint(1, 8))).strip() or "x"

    def coords() -> tuple[int, int, int, int]:
        x0, x1 = sorted(rng.randint(0, 1000) for _ in range(2))
        y0, y1 = sorted(rng.randint(0, 1000) for _ in range(2))
        return x0, y0, x1, y1

    def boxstr() -> str:
        x0, y0, x1, y1 = coords()
        return f"<box>({x0},{y0}),({x1},{y1})</box>"

    makers = {
        "UnclosedTag": [
            lambda: f"<ref>{phrase()}",
            lambda: f"<ref>{phrase()}</ref><box>(1,2),(3,4)",
            lambda: f"<ref>{phrase()}{boxstr()}",
            lambda: f"{phrase()}<ref>{phrase()}<ref>{phrase()}</ref>{boxstr()}",
        ],
        "MalformedCoordinate": [
            lambda: f"<ref>{phrase()}</ref><box>(a,2),(3,4)</box>",
            lambda: f"<ref>{phrase()}</ref><box>(1,2)(3,4)</box>",
            lambda: f"<ref>{phrase()}</ref><box>(1, 2),(3,4)</box>",
            lambda: f"<ref>{phrase()}</ref><box></box>",
            lambda: f"<ref>{phrase()}</ref><box>(1,2),(3,4),(5,6)</box>",
        ],
        "OutOfRange": [
            lambda: f"<ref>{phrase()}</ref><box>(1,2),(3,{rng.randint(1001, 5000)})</box>",
            lambda: f"<ref>{phrase()}</ref><box>(-{rng.randint(1, 50)},2),(3,4)</box>",
            lambda: f"<ref>{phrase()}</ref><box>(900,2),(3,4)</box>",
        ],
        "StrayClose": [
            lambda: f"{phrase()}</ref>{phrase()}",
            lambda: f"</box>{phrase()}",
            lambda: f"{phrase()}</box>",
        ],
        "BoxWithoutRef": [
            lambda: boxstr(),
            lambda: f"{phrase()} {boxstr()}",
            lambda: f"{boxstr()}{boxstr()}",
        ],
        "RefWithoutBox": [
            lambda: f"<ref>{phrase()}</ref>",
            lambda: f"<ref>{phrase()}</ref> {phrase()}",
            lambda: f"<ref>{phrase()}</ref><ref>{phrase()}</ref>{boxstr()}",
        ],
    }
    kinds = sorted(makers)
    cases = []
    while len(cases) < count:
        kind = kinds[len(cases) % len(kinds)]
        cases.append((rng.choice(makers[kind])(), kind))
    return cases


def write_mask(path: Path, grid: list[list[int]], bits: int = 8) -> None:
    arr = np.asarray(grid, dtype=np.uint8 if bits == 8 else np.uint16)
    Image.fromarray(arr).save(path)


def make_meta(
    image_id: str = "img0",
    case_id: str = "case0",
    modality: str = "CT",
    objects: list[tuple[str, NormBox]] | None = None,
    **kw,
) -> MetaRecord:
    return MetaRecord(
        image_id=image_id,
        case_id=case_id,
        modality=modality,
        scanned_region=kw.get("scanned_region", "abdomen"),
        orientation=kw.get("orientation", "axial"),
        width=kw.get("width", 64),
        height=kw.get("height", 64),
        objects=objects if objects is not None else [("liver", NormBox(0.1, 0.1, 0.3, 0.2))],
    )


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20240610)
