"""Grounding markup: the <ref>/<box> token protocol, parser, and serializer.

Wire format, bit-exact:

    <ref>PHRASE</ref><box>(X0,Y0),(X1,Y1)</box>

with unpadded base-10 integers in [0, 1000] and no whitespace inside the
tuples.  A ref may be followed by more than one box group (multi-component
instances).  Plain text may appear between groups.  ``<img>...</img>``
wraps an image reference in full prompts and is not a reserved token of
this grammar.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum

from .geometry import NormBox

REF_OPEN = "<ref>"
REF_CLOSE = "</ref>"
BOX_OPEN = "<box>"
BOX_CLOSE = "</box>"
RESERVED_TOKENS = (REF_OPEN, REF_CLOSE, BOX_OPEN, BOX_CLOSE)

QUANT_MAX = 1000

_TOKEN_RE = re.compile("(" + "|".join(re.escape(t) for t in RESERVED_TOKENS) + ")")
_STRICT_TUPLES_RE = re.compile(r"^\((-?\d+),(-?\d+)\),\((-?\d+),(-?\d+)\)$")
_LENIENT_TUPLES_RE = re.compile(
    r"^\s*\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)\s*,\s*\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)\s*$"
)


class ReservedTokenError(ValueError):
    """Raw text handed to the serializer contains a reserved tag token."""


class IssueKind(str, Enum):
    UNCLOSED_TAG = "UnclosedTag"
    MALFORMED_COORDINATE = "MalformedCoordinate"
    OUT_OF_RANGE = "OutOfRange"
    STRAY_CLOSE = "StrayClose"
    BOX_WITHOUT_REF = "BoxWithoutRef"
    REF_WITHOUT_BOX = "RefWithoutBox"


@dataclass(frozen=True)
class ParseIssue:
    offset: int
    kind: IssueKind
    detail: str


class MarkupParseError(ValueError):
    """Strict parse failure; carries the first issue encountered."""

    def __init__(self, issue: ParseIssue):
        super().__init__(f"{issue.kind.value} at offset {issue.offset}: {issue.detail}")
        self.issue = issue


@dataclass(frozen=True)
class QuantBox:
    """Box coordinates quantized to integers in [0, 1000]."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        if not (0 <= self.x0 <= self.x1 <= QUANT_MAX and 0 <= self.y0 <= self.y1 <= QUANT_MAX):
            raise ValueError(f"invalid quantized box {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class Text:
    raw: str


@dataclass(frozen=True)
class Ref:
    phrase: str
    boxes: tuple[QuantBox, ...]

    def __post_init__(self) -> None:
        if not self.boxes:
            raise ValueError("ref segment requires at least one box")


Segment = Text | Ref


@dataclass(frozen=True)
class MarkedText:
    """Canonical sequence of plain-text and ref segments.

    Canonical means no empty and no adjacent Text segments; use
    :func:`marked` to normalize arbitrary segment lists.
    """

    segments: tuple[Segment, ...] = field(default_factory=tuple)

    def refs(self) -> list[Ref]:
        return [s for s in self.segments if isinstance(s, Ref)]

    def plain_text(self) -> str:
        """Text content with boxes dropped: raw text plus ref phrases, in order."""
        parts = []
        for seg in self.segments:
            parts.append(seg.raw if isinstance(seg, Text) else seg.phrase)
        return "".join(parts)


def marked(*segments: Segment) -> MarkedText:
    """Build a canonical MarkedText, merging adjacent text and dropping empties."""
    out: list[Segment] = []
    for seg in segments:
        if isinstance(seg, Text):
            if not seg.raw:
                continue
            if out and isinstance(out[-1], Text):
                out[-1] = Text(out[-1].raw + seg.raw)
                continue
        out.append(seg)
    return MarkedText(tuple(out))


def quantize(box: NormBox) -> QuantBox:
    """Scale [0,1] coordinates to the [0,1000] integer grid, round half up."""

    def q(v: float) -> int:
        return min(max(math.floor(v * QUANT_MAX + 0.5), 0), QUANT_MAX)

    return QuantBox(q(box.x0), q(box.y0), q(box.x1), q(box.y1))


def dequantize(box: QuantBox) -> NormBox:
    return NormBox(
        box.x0 / QUANT_MAX, box.y0 / QUANT_MAX, box.x1 / QUANT_MAX, box.y1 / QUANT_MAX
    )


def _check_no_reserved(text: str, what: str) -> None:
    for token in RESERVED_TOKENS:
        if token in text:
            raise ReservedTokenError(f"{what} contains reserved token {token!r}")


def render_box(box: QuantBox) -> str:
    return f"{BOX_OPEN}({box.x0},{box.y0}),({box.x1},{box.y1}){BOX_CLOSE}"


def render(mt: MarkedText) -> str:
    """Serialize to the canonical wire string.

    Refuses (rather than escapes) reserved tokens inside raw text or
    phrases so the wire format stays bit-exact.
    """
    parts: list[str] = []
    for seg in mt.segments:
        if isinstance(seg, Text):
            _check_no_reserved(seg.raw, "text segment")
            parts.append(seg.raw)
        else:
            _check_no_reserved(seg.phrase, "ref phrase")
            parts.append(f"{REF_OPEN}{seg.phrase}{REF_CLOSE}")
            parts.extend(render_box(b) for b in seg.boxes)
    return "".join(parts)


def extract_boxes(mt: MarkedText) -> list[tuple[str, QuantBox]]:
    """All (phrase, box) pairs in document order, one pair per box."""
    pairs: list[tuple[str, QuantBox]] = []
    for ref in mt.refs():
        pairs.extend((ref.phrase, box) for box in ref.boxes)
    return pairs


def wrap_image(image_ref: str) -> str:
    """Wrap an image reference in <img> markers for a full model prompt."""
    return f"<img>{image_ref}</img>"


class _Parser:
    """Single-pass parser over the reserved-token stream.

    Lenient recovery rules:
      - orphan <box> groups become Ref("", boxes)           (BoxWithoutRef)
      - a ref closed without any box demotes to plain text  (RefWithoutBox)
      - unclosed tags close at end of input                 (UnclosedTag)
      - out-of-range coordinates clamp to [0,1000], swapped
        into order when reversed                            (OutOfRange)
      - stray close tags are dropped                        (StrayClose)
      - unparseable box contents drop the group             (MalformedCoordinate)
    """

    def __init__(self, source: str, strict: bool):
        self.source = source
        self.strict = strict
        self.issues: list[ParseIssue] = []
        self.segments: list[Segment] = []
        # (token_or_None, offset); None marks trailing end-of-input
        self.tokens: list[tuple[str | None, int]] = []
        pos = 0
        for piece in _TOKEN_RE.split(source):
            if piece in RESERVED_TOKENS:
                self.tokens.append((piece, pos))
            elif piece:
                self.tokens.append((None, pos))
            pos += len(piece)
        self.index = 0

    def _issue(self, offset: int, kind: IssueKind, detail: str) -> None:
        issue = ParseIssue(min(offset, max(len(self.source) - 1, 0)), kind, detail)
        if self.strict:
            raise MarkupParseError(issue)
        self.issues.append(issue)

    def _peek(self) -> tuple[str | None, int] | None:
        if self.index < len(self.tokens):
            return self.tokens[self.index]
        return None

    def _text_at(self, tok_index: int) -> str:
        token, offset = self.tokens[tok_index]
        assert token is None
        end = (
            self.tokens[tok_index + 1][1]
            if tok_index + 1 < len(self.tokens)
            else len(self.source)
        )
        return self.source[offset:end]

    def _emit_text(self, text: str) -> None:
        if not text:
            return
        if self.segments and isinstance(self.segments[-1], Text):
            self.segments[-1] = Text(self.segments[-1].raw + text)
        else:
            self.segments.append(Text(text))

    def _emit_ref(self, phrase: str, boxes: list[QuantBox]) -> None:
        self.segments.append(Ref(phrase, tuple(boxes)))

    def parse(self) -> MarkedText:
        while (entry := self._peek()) is not None:
            token, offset = entry
            if token is None:
                self._emit_text(self._text_at(self.index))
                self.index += 1
            elif token == REF_OPEN:
                self.index += 1
                self._parse_ref(offset)
            elif token == BOX_OPEN:
                self._issue(offset, IssueKind.BOX_WITHOUT_REF, "box group without a preceding ref")
                boxes = self._parse_box_groups()
                if boxes:
                    self._emit_ref("", boxes)
            else:
                self._issue(offset, IssueKind.STRAY_CLOSE, f"unmatched {token}")
                self.index += 1
        return MarkedText(tuple(self.segments))

    def _parse_ref(self, open_offset: int) -> None:
        phrase_parts: list[str] = []
        while True:
            entry = self._peek()
            if entry is None:
                self._issue(open_offset, IssueKind.UNCLOSED_TAG, "<ref> not closed")
                self._emit_text("".join(phrase_parts))
                return
            token, offset = entry
            if token is None:
                phrase_parts.append(self._text_at(self.index))
                self.index += 1
            elif token == REF_CLOSE:
                self.index += 1
                break
            elif token == BOX_OPEN:
                # missing </ref>; lenient treats the boxes as belonging to this ref
                self._issue(offset, IssueKind.UNCLOSED_TAG, "<ref> not closed before <box>")
                break
            elif token == REF_OPEN:
                self._issue(offset, IssueKind.UNCLOSED_TAG, "<ref> reopened before close")
                self._demote_ref("".join(phrase_parts), offset)
                self.index += 1
                self._parse_ref(offset)
                return
            else:
                self._issue(offset, IssueKind.STRAY_CLOSE, f"unmatched {token} inside ref")
                self.index += 1
        phrase = "".join(phrase_parts)
        boxes = self._parse_box_groups()
        if boxes:
            self._emit_ref(phrase, boxes)
        else:
            self._issue(open_offset, IssueKind.REF_WITHOUT_BOX, "ref not followed by a box group")
            self._emit_text(phrase)

    def _demote_ref(self, phrase: str, offset: int) -> None:
        boxes = self._parse_box_groups()
        if boxes:
            self._emit_ref(phrase, boxes)
        else:
            self._emit_text(phrase)

    def _parse_box_groups(self) -> list[QuantBox]:
        boxes: list[QuantBox] = []
        while (entry := self._peek()) is not None and entry[0] == BOX_OPEN:
            open_offset = entry[1]
            self.index += 1
            content_parts: list[str] = []
            content_offset = open_offset + len(BOX_OPEN)
            closed = False
            while (inner := self._peek()) is not None:
                token, offset = inner
                if token is None:
                    content_parts.append(self._text_at(self.index))
                    self.index += 1
                elif token == BOX_CLOSE:
                    self.index += 1
                    closed = True
                    break
                else:
                    break
            if not closed:
                self._issue(open_offset, IssueKind.UNCLOSED_TAG, "<box> not closed")
            box = self._parse_box_content("".join(content_parts), content_offset)
            if box is not None:
                boxes.append(box)
        return boxes

    def _parse_box_content(self, content: str, offset: int) -> QuantBox | None:
        pattern = _STRICT_TUPLES_RE if self.strict else _LENIENT_TUPLES_RE
        m = pattern.match(content)
        if m is None:
            self._issue(
                offset,
                IssueKind.MALFORMED_COORDINATE,
                f"box content {content!r} does not match (X,Y),(X,Y)",
            )
            return None
        x0, y0, x1, y1 = (int(g) for g in m.groups())
        clamped = [min(max(v, 0), QUANT_MAX) for v in (x0, y0, x1, y1)]
        if clamped != [x0, y0, x1, y1]:
            self._issue(offset, IssueKind.OUT_OF_RANGE, f"coordinates clamped in {content!r}")
            x0, y0, x1, y1 = clamped
        if x0 > x1 or y0 > y1:
            self._issue(offset, IssueKind.OUT_OF_RANGE, f"coordinates out of order in {content!r}")
            x0, x1 = min(x0, x1), max(x0, x1)
            y0, y1 = min(y0, y1), max(y0, y1)
        return QuantBox(x0, y0, x1, y1)


def parse(source: str, mode: str = "strict") -> tuple[MarkedText, list[ParseIssue]]:
    """Parse a wire string into MarkedText.

    ``strict`` raises :class:`MarkupParseError` on the first grammar
    violation; ``lenient`` never fails and returns recovery issues
    alongside an invariant-satisfying document.
    """
    if mode not in ("strict", "lenient"):
        raise ValueError(f"unknown parse mode {mode!r}")
    parser = _Parser(source, strict=(mode == "strict"))
    doc = parser.parse()
    return doc, parser.issues
