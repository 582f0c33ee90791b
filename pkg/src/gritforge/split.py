"""Redundancy-aware slice sampling and leakage-free case-level splitting.

All pseudo-randomness comes from a SplitMix64 stream so that the same
(seed, corpus) pair yields the same assignment in any implementation:

    state <- state + 0x9E3779B97F4A7C15            (mod 2^64)
    z <- state
    z <- (z XOR z>>30) * 0xBF58476D1CE4E5B9        (mod 2^64)
    z <- (z XOR z>>27) * 0x94D049BB133111EB        (mod 2^64)
    output z XOR z>>31

Cases are ordered by the key splitmix64(seed XOR fnv1a64(case_id)) rather
than by an index shuffle, so dropping one case never reorders the rest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .geometry import box_iou
from .ingest import MetaRecord

MASK64 = (1 << 64) - 1

DEFAULT_MAX_PER_CASE = 10
DEFAULT_DEDUP_THRESHOLD = 0.85


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step; returns (output, next_state)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31), state


class SplitStream:
    """Deterministic 64-bit stream with convenience draws."""

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        value, self._state = splitmix64(self._state)
        return value

    def below(self, bound: int) -> int:
        if bound <= 0:
            raise ValueError("bound must be positive")
        return self.next_u64() % bound

    def choice(self, items: Sequence):
        return items[self.below(len(items))]

    def uniform(self) -> float:
        return self.next_u64() / float(1 << 64)


def fnv1a64(text: str) -> int:
    digest = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        digest = ((digest ^ byte) * 0x100000001B3) & MASK64
    return digest


def case_order_key(seed: int, case_id: str) -> int:
    value, _ = splitmix64((seed ^ fnv1a64(case_id)) & MASK64)
    return value


@dataclass
class CaseGroup:
    case_id: str
    members: list[str]
    modality: str

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError(f"case {self.case_id!r} has no members")


@dataclass
class SplitAssignment:
    train: set[str]
    test: set[str]
    seed: int
    test_fraction: float
    achieved_test_fraction: float
    stratum_fractions: dict[str, float] = field(default_factory=dict)

    def side_of(self, case_id: str) -> str | None:
        if case_id in self.test:
            return "test"
        if case_id in self.train:
            return "train"
        return None

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "achieved_test_fraction": self.achieved_test_fraction,
            "train": sorted(self.train),
            "test": sorted(self.test),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SplitAssignment":
        return cls(
            train=set(obj["train"]),
            test=set(obj["test"]),
            seed=int(obj["seed"]),
            test_fraction=float(obj["test_fraction"]),
            achieved_test_fraction=float(obj["achieved_test_fraction"]),
        )


def group_cases(metas: Iterable[MetaRecord]) -> list[CaseGroup]:
    """Group image ids by case_id, preserving first-seen case order."""
    groups: dict[str, CaseGroup] = {}
    for meta in metas:
        group = groups.get(meta.case_id)
        if group is None:
            groups[meta.case_id] = CaseGroup(meta.case_id, [meta.image_id], meta.modality)
        else:
            if group.modality != meta.modality:
                raise ValueError(
                    f"case {meta.case_id!r} mixes modalities "
                    f"{group.modality} and {meta.modality}"
                )
            group.members.append(meta.image_id)
    return list(groups.values())


def _slice_similarity(a: MetaRecord, b: MetaRecord) -> float:
    """Mean best same-category IoU of b's boxes against a's; 1.0 for two
    objectless slices (fully redundant), 0.0 when only one side is empty."""
    if not a.objects and not b.objects:
        return 1.0
    if not a.objects or not b.objects:
        return 0.0
    total = 0.0
    for cat_b, box_b in b.objects:
        best = 0.0
        for cat_a, box_a in a.objects:
            if cat_a == cat_b:
                best = max(best, box_iou(box_a, box_b))
        total += best
    return total / len(b.objects)


def sample_slices(
    group: CaseGroup,
    metas: Mapping[str, MetaRecord],
    max_per_case: int = DEFAULT_MAX_PER_CASE,
    dedup_threshold: float = DEFAULT_DEDUP_THRESHOLD,
) -> list[str]:
    """Greedy redundancy filter over a case's slices, capped at max_per_case.

    Walks members in input order and drops a slice whose object boxes are
    too similar (mean IoU above the threshold) to any already-kept slice.
    """
    if max_per_case < 1:
        raise ValueError("max_per_case must be >= 1")
    kept: list[str] = []
    kept_metas: list[MetaRecord] = []
    for image_id in group.members:
        if len(kept) >= max_per_case:
            break
        meta = metas[image_id]
        if any(_slice_similarity(prev, meta) > dedup_threshold for prev in kept_metas):
            continue
        kept.append(image_id)
        kept_metas.append(meta)
    return kept


def split_cases(
    groups: Sequence[CaseGroup], test_fraction: float, seed: int
) -> SplitAssignment:
    """Assign whole cases to train/test, stratified by modality.

    Within each modality stratum, cases are visited in seeded pseudo-random
    order and assigned to test while the test side holds fewer images than
    test_fraction of the stratum.  A case is never split across sides; a
    single case larger than the target is still assigned whole and the
    overshoot shows up in the achieved fractions.
    """
    if not groups:
        raise ValueError("no case groups to split")
    if not (0.0 < test_fraction < 1.0):
        raise ValueError(f"test_fraction must be in (0,1), got {test_fraction}")
    strata: dict[str, list[CaseGroup]] = {}
    for group in groups:
        strata.setdefault(group.modality, []).append(group)

    train: set[str] = set()
    test: set[str] = set()
    stratum_fractions: dict[str, float] = {}
    total_images = 0
    test_images = 0
    for modality in sorted(strata):
        cases = sorted(strata[modality], key=lambda g: (case_order_key(seed, g.case_id), g.case_id))
        stratum_images = sum(len(g.members) for g in cases)
        target = test_fraction * stratum_images
        assigned = 0
        for group in cases:
            if assigned < target:
                test.add(group.case_id)
                assigned += len(group.members)
            else:
                train.add(group.case_id)
        stratum_fractions[modality] = assigned / stratum_images
        total_images += stratum_images
        test_images += assigned
    return SplitAssignment(
        train=train,
        test=test,
        seed=seed,
        test_fraction=test_fraction,
        achieved_test_fraction=test_images / total_images,
        stratum_fractions=stratum_fractions,
    )


def write_split(assignment: SplitAssignment, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(assignment.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_split(path) -> SplitAssignment:
    with open(path, encoding="utf-8") as fh:
        return SplitAssignment.from_json(json.load(fh))
