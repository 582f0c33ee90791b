"""Turn meta records and captions into four-task instruction conversations.

Two interchangeable backends: a deterministic template backend (default,
fully offline) and an LLM backend that sends versioned prompts through
the gateway and validates whatever comes back.  Records serialize to
JSONL with questions/answers stored as wire-format markup strings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .gateway import ChatClient, ChatRequest, GatewayError
from .ingest import MetaRecord
from .markup import MarkedText, Ref, Text, marked, parse, quantize, render, wrap_image
from .split import SplitAssignment

PROMPT_VERSION = "v1"
DEFAULT_OBJECT_CAP = 3


class TaskKind(str, Enum):
    ROC = "ROC"
    RC = "RC"
    VG = "VG"
    MIA = "MIA"


REGION_TASKS = (TaskKind.ROC, TaskKind.RC, TaskKind.VG)
ALL_TASKS = (TaskKind.ROC, TaskKind.RC, TaskKind.VG, TaskKind.MIA)


class NoObjectsError(ValueError):
    """A region task was requested for an image without objects."""


class SplitCoverageGapError(KeyError):
    """An image's case is on neither side of the split."""


class BackendUnavailableError(RuntimeError):
    """The generation backend cannot serve (offline miss, transport, auth)."""


@dataclass(frozen=True)
class Turn:
    turn_id: int
    task: TaskKind
    question: MarkedText
    answer: MarkedText

    def to_json(self) -> dict:
        return {
            "turn_id": self.turn_id,
            "task": self.task.value,
            "question": render(self.question),
            "answer": render(self.answer),
        }


@dataclass
class ConversationRecord:
    image_id: str
    case_id: str
    modality: str
    width: int
    height: int
    caption: str
    turns: list[Turn]

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "case_id": self.case_id,
            "modality": self.modality,
            "width": self.width,
            "height": self.height,
            "caption": self.caption,
            "turns": [t.to_json() for t in self.turns],
        }


def full_prompt(image_ref: str, question: str) -> str:
    """Model-facing prompt for one turn: the <img> marker exactly once."""
    return wrap_image(image_ref) + question


def load_prompt(name: str) -> str:
    return resources.files("gritforge.prompts").joinpath(f"{name}_{PROMPT_VERSION}.txt").read_text(
        encoding="utf-8"
    )


def _unique_categories(objects: list) -> list[str]:
    seen: list[str] = []
    for category, _ in objects:
        if category not in seen:
            seen.append(category)
    return seen


class TemplateBackend:
    """Deterministic question/answer templates; byte-identical across runs.

    ``negative_hook`` is an off-by-default extension point for
    absent-object QA: called as hook(meta, caption, next_turn_id) and may
    return extra turns appended after the regular ones.  Source corpora
    rarely annotate every organ, so synthesizing reliable negatives needs
    corpus-specific knowledge the default pipeline does not have.
    """

    def __init__(
        self,
        object_cap: int = DEFAULT_OBJECT_CAP,
        negative_hook: Callable[[MetaRecord, str, int], list["Turn"]] | None = None,
    ):
        self.object_cap = object_cap
        self.negative_hook = negative_hook

    def caption(self, meta: MetaRecord) -> str:
        cats = _unique_categories(meta.objects)
        head = f"A {meta.orientation} {meta.modality} image of the {meta.scanned_region}"
        if cats:
            return f"{head} showing {', '.join(cats)}."
        return f"{head}."

    def turns(self, meta: MetaRecord, caption: str, tasks: list[TaskKind]) -> list[Turn]:
        if any(t in REGION_TASKS for t in tasks) and not meta.objects:
            raise NoObjectsError(f"{meta.image_id}: region task requested without objects")
        picked = meta.objects[: self.object_cap]
        turns: list[Turn] = []
        for task in tasks:
            if task is TaskKind.MIA:
                turns.append(self._mia_turn(len(turns), caption))
            elif task is TaskKind.VG:
                for category in _unique_categories(picked):
                    boxes = tuple(quantize(b) for c, b in picked if c == category)
                    turns.append(self._vg_turn(len(turns), category, boxes))
            else:
                for category, box in picked:
                    qbox = quantize(box)
                    if task is TaskKind.ROC:
                        turns.append(self._roc_turn(len(turns), category, qbox))
                    else:
                        turns.append(self._rc_turn(len(turns), meta, category, qbox))
        if self.negative_hook is not None:
            turns.extend(self.negative_hook(meta, caption, len(turns)))
        return turns

    def _vg_turn(self, turn_id: int, category: str, boxes) -> Turn:
        question = marked(Text(f"Where is the {category} in this image?"))
        answer = marked(Ref(category, boxes))
        return Turn(turn_id, TaskKind.VG, question, answer)

    def _roc_turn(self, turn_id: int, category: str, qbox) -> Turn:
        question = marked(
            Text("What is the object in "), Ref("this region", (qbox,)), Text("?")
        )
        answer = marked(Text(category))
        return Turn(turn_id, TaskKind.ROC, question, answer)

    def _rc_turn(self, turn_id: int, meta: MetaRecord, category: str, qbox) -> Turn:
        question = marked(
            Text("Please describe "), Ref("this region", (qbox,)), Text(" of the image.")
        )
        answer = marked(
            Ref(category, (qbox,)),
            Text(
                f" is a {category} visible in this {meta.modality} image"
                f" of the {meta.scanned_region}."
            ),
        )
        return Turn(turn_id, TaskKind.RC, question, answer)

    def _mia_turn(self, turn_id: int, caption: str) -> Turn:
        question = marked(Text("What can be observed in this medical image?"))
        answer = marked(Text(caption))
        return Turn(turn_id, TaskKind.MIA, question, answer)


class LlmBackend:
    """Generation through the chat gateway using the shipped prompt files.

    Responses are untrusted: markup must strict-parse, task roles must
    hold, and VG boxes must equal the quantized meta boxes.
    """

    def __init__(
        self,
        client: ChatClient,
        model: str,
        temperature: float = 0.2,
        max_tokens: int = 1024,
        object_cap: int = DEFAULT_OBJECT_CAP,
    ):
        self.client = client
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.object_cap = object_cap
        self._caption_prompt = load_prompt("caption")
        self._conversation_prompt = load_prompt("conversation")

    def _chat(self, prompt: str) -> str:
        req = ChatRequest.build(
            self.model,
            [("user", prompt)],
            temperature=self.temperature,
            max_tokens=self.max_tokens,
        )
        try:
            return self.client.chat(req)
        except GatewayError as exc:
            raise BackendUnavailableError(str(exc)) from exc

    def _meta_facts(self, meta: MetaRecord) -> str:
        facts = meta.to_json()
        facts["objects"] = [
            {"category": c, "box": list(quantize(b).as_tuple())}
            for c, b in meta.objects[: self.object_cap]
        ]
        return json.dumps(facts, ensure_ascii=False, indent=2)

    def caption(self, meta: MetaRecord) -> str:
        text = self._chat(self._caption_prompt.format(meta_json=self._meta_facts(meta))).strip()
        if not text:
            raise BackendUnavailableError(f"{meta.image_id}: empty caption from backend")
        return text

    def turns(self, meta: MetaRecord, caption: str, tasks: list[TaskKind]) -> list[Turn]:
        if any(t in REGION_TASKS for t in tasks) and not meta.objects:
            raise NoObjectsError(f"{meta.image_id}: region task requested without objects")
        prompt = self._conversation_prompt.format(
            meta_json=self._meta_facts(meta),
            caption=caption,
            tasks=", ".join(t.value for t in tasks),
        )
        raw = self._chat(prompt)
        return self._validate_turns(meta, raw)

    def _validate_turns(self, meta: MetaRecord, raw: str) -> list[Turn]:
        try:
            items = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{meta.image_id}: backend reply is not JSON: {exc}") from exc
        if not isinstance(items, list) or not items:
            raise ValueError(f"{meta.image_id}: backend reply is not a nonempty array")
        allowed_boxes = {quantize(b) for _, b in meta.objects}
        turns: list[Turn] = []
        for obj in items:
            task = TaskKind(obj["task"])
            question, _ = parse(obj["question"], "strict")
            answer, _ = parse(obj["answer"], "strict")
            check_turn_roles(task, question, answer)
            if task is TaskKind.VG:
                for ref in answer.refs():
                    for box in ref.boxes:
                        if box not in allowed_boxes:
                            raise ValueError(
                                f"{meta.image_id}: VG box {box.as_tuple()} not in meta"
                            )
            turns.append(Turn(len(turns), task, question, answer))
        return turns


def check_turn_roles(task: TaskKind, question: MarkedText, answer: MarkedText) -> None:
    """Region-in/region-out placement rules; raises ValueError on violation."""
    if task is TaskKind.MIA:
        if question.refs() or answer.refs():
            raise ValueError("MIA turns must not contain ref segments")
    elif task is TaskKind.VG:
        if not answer.refs():
            raise ValueError("VG answers must contain a ref segment")
    else:  # ROC / RC are region-in
        if not question.refs():
            raise ValueError(f"{task.value} questions must contain a ref segment")


def build_caption(meta: MetaRecord, backend) -> str:
    caption = backend.caption(meta)
    if not caption:
        raise BackendUnavailableError(f"{meta.image_id}: backend produced an empty caption")
    return caption


def build_turns(meta: MetaRecord, caption: str, tasks: list[TaskKind], backend) -> list[Turn]:
    if not tasks:
        raise ValueError("tasks must be nonempty")
    return backend.turns(meta, caption, tasks)


@dataclass
class DatasetStats:
    images: int = 0
    skipped_images: int = 0
    total_turns: int = 0
    turns_per_task: dict[str, int] = field(default_factory=dict)
    per_side_images: dict[str, int] = field(default_factory=dict)
    per_side_turns: dict[str, int] = field(default_factory=dict)
    region_task_skips: int = 0

    def to_json(self) -> dict:
        out = {
            "images": self.images,
            "skipped_images": self.skipped_images,
            "total_turns": self.total_turns,
            "turns_per_task": dict(sorted(self.turns_per_task.items())),
            "region_task_skips": self.region_task_skips,
        }
        if self.per_side_images:
            out["per_side_images"] = dict(sorted(self.per_side_images.items()))
            out["per_side_turns"] = dict(sorted(self.per_side_turns.items()))
            total_i = sum(self.per_side_images.values())
            total_t = sum(self.per_side_turns.values())
            out["test_fraction_images"] = self.per_side_images.get("test", 0) / total_i if total_i else 0.0
            out["test_fraction_turns"] = self.per_side_turns.get("test", 0) / total_t if total_t else 0.0
        return out


def build_records(
    metas: Iterable[MetaRecord],
    captions: Mapping[str, str] | Callable[[MetaRecord], str],
    tasks: list[TaskKind],
    backend,
    stats: DatasetStats,
) -> Iterable[ConversationRecord]:
    """Stream ConversationRecords; region tasks are skipped (and counted)
    for objectless images rather than failing the whole run."""
    caption_of = captions if callable(captions) else lambda m: captions[m.image_id]
    for meta in metas:
        caption = caption_of(meta)
        eligible = list(tasks)
        if not meta.objects:
            eligible = [t for t in tasks if t not in REGION_TASKS]
            stats.region_task_skips += len(tasks) - len(eligible)
        if not eligible:
            stats.skipped_images += 1
            continue
        turns = build_turns(meta, caption, eligible, backend)
        stats.images += 1
        stats.total_turns += len(turns)
        for turn in turns:
            stats.turns_per_task[turn.task.value] = (
                stats.turns_per_task.get(turn.task.value, 0) + 1
            )
        yield ConversationRecord(
            meta.image_id, meta.case_id, meta.modality, meta.width, meta.height, caption, list(turns)
        )


def build_dataset(
    metas: Iterable[MetaRecord],
    captions: Mapping[str, str] | Callable[[MetaRecord], str],
    tasks: list[TaskKind],
    backend,
    out_path: Path,
    split: SplitAssignment | None = None,
    test_out_path: Path | None = None,
) -> DatasetStats:
    """Write dataset JSONL (one record per image), optionally split by side.

    With a split, ``out_path`` receives the train side and
    ``test_out_path`` the test side; every image's case must be covered.
    """
    if split is not None and test_out_path is None:
        raise ValueError("test_out_path required when splitting")
    stats = DatasetStats()
    train_fh = open(out_path, "w", encoding="utf-8")
    test_fh = open(test_out_path, "w", encoding="utf-8") if split is not None else None
    try:
        for record in build_records(metas, captions, tasks, backend, stats):
            side = "all"
            fh = train_fh
            if split is not None:
                side = split.side_of(record.case_id)
                if side is None:
                    raise SplitCoverageGapError(
                        f"case {record.case_id!r} missing from split assignment"
                    )
                fh = test_fh if side == "test" else train_fh
            stats.per_side_images[side] = stats.per_side_images.get(side, 0) + 1
            stats.per_side_turns[side] = stats.per_side_turns.get(side, 0) + len(record.turns)
            fh.write(json.dumps(record.to_json(), ensure_ascii=False) + "\n")
    finally:
        train_fh.close()
        if test_fh is not None:
            test_fh.close()
    return stats


def read_records(path: Path) -> Iterable[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


_RECORD_FIELDS = ("image_id", "case_id", "modality", "width", "height", "caption", "turns")


def validate_record(obj: dict) -> list[str]:
    """Schema, markup, and task-role checks for one dataset record.

    Returns human-readable violation strings; empty means the record is
    exactly what the generator is allowed to emit.
    """
    from .ingest import MODALITIES
    from .markup import MarkupParseError

    violations: list[str] = []
    for name in _RECORD_FIELDS:
        if name not in obj:
            violations.append(f"missing field {name!r}")
    if violations:
        return violations
    if obj["modality"] not in MODALITIES:
        violations.append(f"unknown modality {obj['modality']!r}")
    if not (isinstance(obj["width"], int) and obj["width"] > 0):
        violations.append("width must be a positive integer")
    if not (isinstance(obj["height"], int) and obj["height"] > 0):
        violations.append("height must be a positive integer")
    if not str(obj["caption"]).strip():
        violations.append("caption is empty")
    turns = obj["turns"]
    if not turns:
        violations.append("record has no turns")
    for position, turn in enumerate(turns):
        where = f"turn {position}"
        if int(turn.get("turn_id", -1)) != position:
            violations.append(f"{where}: turn_id not dense from 0")
        try:
            task = TaskKind(turn["task"])
        except (ValueError, KeyError):
            violations.append(f"{where}: unknown task {turn.get('task')!r}")
            continue
        sides = {}
        bad_markup = False
        for side in ("question", "answer"):
            try:
                sides[side], _ = parse(turn[side], "strict")
            except MarkupParseError as exc:
                violations.append(f"{where} {side}: {exc.issue.kind.value}: {exc.issue.detail}")
                bad_markup = True
        if bad_markup:
            continue
        try:
            check_turn_roles(task, sides["question"], sides["answer"])
        except ValueError as exc:
            violations.append(f"{where}: {exc}")
    return violations
