"""Task metrics: box IoU / Recall@0.5, label recall, and the mBMR text
suite (BLEU@4, METEOR-lite, ROUGE-L), plus task x modality aggregation.

All metrics are per-sample and land in [0, 1]; tables are averaged over
present cells only, matching how the reference results skip untested
modalities.  METEOR is implemented with exact + suffix-stemmed matching
stages only (no external synonym database) and is reported as
"meteor_lite" to flag that divergence.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from statistics import fmean

from .geometry import NormBox, box_iou
from .ingest import MODALITIES

TASK_ORDER = ("VG", "ROC", "RC", "MIA")

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_TRAILING_PUNCT = ".,;:!?"


class EmptyGoldError(ValueError):
    pass


class JoinError(ValueError):
    pass


def iou(a: NormBox, b: NormBox) -> float:
    """Intersection over union; 0.0 when the union has no area."""
    return box_iou(a, b)


def normalize_label(text: str, synonyms: dict[str, str] | None = None) -> str:
    """Case-fold, trim, collapse whitespace, strip trailing punctuation,
    then apply the optional synonym table."""
    norm = " ".join(text.casefold().split()).rstrip(_TRAILING_PUNCT).strip()
    if synonyms:
        folded = {" ".join(k.casefold().split()): v for k, v in synonyms.items()}
        norm = folded.get(norm, norm)
        norm = " ".join(norm.casefold().split())
    return norm


def roc_recall(pred_label: str, gold_label: str, synonyms: dict[str, str] | None = None) -> int:
    if not gold_label.strip():
        raise EmptyGoldError("gold label is empty")
    return int(normalize_label(pred_label, synonyms) == normalize_label(gold_label, synonyms))


def recall_at(
    preds: list[tuple[str, NormBox]],
    golds: list[tuple[str, NormBox]],
    threshold: float = 0.5,
    ignore_phrase: bool = False,
    synonyms: dict[str, str] | None = None,
) -> float:
    """Fraction of gold boxes matched one-to-one by a prediction with IoU
    strictly above the threshold, matching in descending IoU order among
    phrase-compatible pairs."""
    if not golds:
        raise EmptyGoldError("no gold boxes")
    if not preds:
        return 0.0
    candidates = []
    for pi, (p_phrase, p_box) in enumerate(preds):
        for gi, (g_phrase, g_box) in enumerate(golds):
            if not ignore_phrase and normalize_label(p_phrase, synonyms) != normalize_label(
                g_phrase, synonyms
            ):
                continue
            value = iou(p_box, g_box)
            if value > threshold:
                candidates.append((value, pi, gi))
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_preds: set[int] = set()
    used_golds: set[int] = set()
    matched = 0
    for _, pi, gi in candidates:
        if pi in used_preds or gi in used_golds:
            continue
        used_preds.add(pi)
        used_golds.add(gi)
        matched += 1
    return matched / len(golds)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _ngrams(tokens: list[str], n: int) -> dict[tuple[str, ...], int]:
    counts: dict[tuple[str, ...], int] = {}
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i : i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def bleu4(pred: str, ref: str) -> float:
    """Sentence BLEU@4: modified n-gram precision with add-one smoothing on
    n >= 2 and the exp(1 - r/c) brevity penalty when the candidate is short."""
    pred_tokens = tokenize(pred)
    ref_tokens = tokenize(ref)
    if not pred_tokens or not ref_tokens:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        pred_counts = _ngrams(pred_tokens, n)
        ref_counts = _ngrams(ref_tokens, n)
        clipped = sum(min(c, ref_counts.get(g, 0)) for g, c in pred_counts.items())
        total = sum(pred_counts.values())
        if n == 1:
            if clipped == 0:
                return 0.0
            precision = clipped / total
        else:
            precision = (clipped + 1) / (total + 1)
        log_sum += math.log(precision)
    c, r = len(pred_tokens), len(ref_tokens)
    brevity = math.exp(1.0 - r / c) if c < r else 1.0
    return brevity * math.exp(log_sum / 4.0)


def lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for token in a:
        cur = [0] * (len(b) + 1)
        for j, other in enumerate(b, start=1):
            if token == other:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(pred: str, ref: str) -> float:
    """Longest-common-subsequence F1 over tokens (balanced beta = 1)."""
    pred_tokens = tokenize(pred)
    ref_tokens = tokenize(ref)
    if not pred_tokens or not ref_tokens:
        return 0.0
    lcs = lcs_length(pred_tokens, ref_tokens)
    if lcs == 0:
        return 0.0
    precision = lcs / len(pred_tokens)
    recall = lcs / len(ref_tokens)
    return 2 * precision * recall / (precision + recall)


def stem(token: str) -> str:
    """Fixed suffix-stripping stemmer used by the METEOR stemmed stage."""
    for suffix in ("ing", "ed", "es", "ly", "s"):
        if token.endswith(suffix) and len(token) - len(suffix) >= 2:
            token = token[: -len(suffix)]
            break
    if len(token) >= 3 and token[-1] == token[-2] and token[-1] not in "aeiou":
        token = token[:-1]
    return token


def _meteor_alignment(pred_tokens: list[str], ref_tokens: list[str]) -> list[tuple[int, int]]:
    """Two-stage greedy unigram alignment: exact matches first, then
    stemmed matches among the leftovers; in-order first-available pairing."""
    matches: list[tuple[int, int]] = []
    used_ref: set[int] = set()
    matched_pred: set[int] = set()
    for exact in (True, False):
        keyed_ref = [t if exact else stem(t) for t in ref_tokens]
        for pi, token in enumerate(pred_tokens):
            if pi in matched_pred:
                continue
            key = token if exact else stem(token)
            for ri, other in enumerate(keyed_ref):
                if ri in used_ref or key != other:
                    continue
                matches.append((pi, ri))
                used_ref.add(ri)
                matched_pred.add(pi)
                break
    matches.sort()
    return matches


def _chunk_count(matches: list[tuple[int, int]]) -> int:
    chunks = 0
    prev: tuple[int, int] | None = None
    for pi, ri in matches:
        if prev is None or pi != prev[0] + 1 or ri != prev[1] + 1:
            chunks += 1
        prev = (pi, ri)
    return chunks


def meteor_lite(pred: str, ref: str) -> float:
    """Unigram-overlap METEOR with a fragmentation penalty.

    score = Fmean * (1 - 0.5 * (chunks/m)^3), Fmean = 10PR / (R + 9P).
    """
    pred_tokens = tokenize(pred)
    ref_tokens = tokenize(ref)
    if not pred_tokens or not ref_tokens:
        return 0.0
    matches = _meteor_alignment(pred_tokens, ref_tokens)
    m = len(matches)
    if m == 0:
        return 0.0
    precision = m / len(pred_tokens)
    recall = m / len(ref_tokens)
    fmean_score = 10 * precision * recall / (recall + 9 * precision)
    penalty = 0.5 * (_chunk_count(matches) / m) ** 3
    return fmean_score * (1.0 - penalty)


def mbmr(pred: str, ref: str) -> float:
    """Arithmetic mean of BLEU@4, METEOR-lite, and ROUGE-L."""
    return (bleu4(pred, ref) + meteor_lite(pred, ref) + rouge_l(pred, ref)) / 3.0


@dataclass(frozen=True)
class SampleScore:
    image_id: str
    turn_id: int
    task: str
    modality: str
    value: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.value <= 1.0):
            raise ValueError(f"score {self.value} outside [0,1]")


@dataclass
class ScoreTable:
    cells: dict[tuple[str, str], float] = field(default_factory=dict)
    counts: dict[tuple[str, str], int] = field(default_factory=dict)
    row_avg: dict[str, float] = field(default_factory=dict)
    col_avg: dict[str, float] = field(default_factory=dict)

    def cell(self, task: str, modality: str) -> float | None:
        return self.cells.get((task, modality))


def aggregate(scores: list[SampleScore]) -> ScoreTable:
    """Mean per (task, modality) cell; row/column averages skip absent cells."""
    buckets: dict[tuple[str, str], list[float]] = {}
    for s in scores:
        buckets.setdefault((s.task, s.modality), []).append(s.value)
    table = ScoreTable()
    for key, values in buckets.items():
        table.cells[key] = fmean(values)
        table.counts[key] = len(values)
    for task in TASK_ORDER:
        present = [table.cells[(task, m)] for m in MODALITIES if (task, m) in table.cells]
        if present:
            table.row_avg[task] = fmean(present)
    for modality in MODALITIES:
        present = [table.cells[(t, modality)] for t in TASK_ORDER if (t, modality) in table.cells]
        if present:
            table.col_avg[modality] = fmean(present)
    return table
