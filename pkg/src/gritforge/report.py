"""Join predictions to gold turns, score them, and render reports.

The report path writes four artifacts per run: report.json (full
precision), report.md and report.csv (task x modality grid, values x100
rounded to 2 decimals at render time, "-" for absent cells), and PNG
figures under figures/.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .ingest import MODALITIES
from .markup import dequantize, extract_boxes, parse
from .metrics import (
    TASK_ORDER,
    JoinError,
    SampleScore,
    ScoreTable,
    aggregate,
    mbmr,
    recall_at,
    roc_recall,
)

TASK_METRIC_LABELS = {
    "VG": "Recall@0.5",
    "ROC": "Recall",
    "RC": "mBMR, SPICE-substitute",
    "MIA": "mBMR",
}

RECALL_THRESHOLD = 0.5


@dataclass
class GoldTurn:
    image_id: str
    turn_id: int
    task: str
    modality: str
    answer: str


def load_gold_turns(records: Iterable[dict]) -> dict[tuple[str, int], GoldTurn]:
    golds: dict[tuple[str, int], GoldTurn] = {}
    for record in records:
        for turn in record["turns"]:
            key = (record["image_id"], int(turn["turn_id"]))
            if key in golds:
                raise JoinError(f"duplicate gold turn {key}")
            golds[key] = GoldTurn(
                image_id=record["image_id"],
                turn_id=int(turn["turn_id"]),
                task=turn["task"],
                modality=record["modality"],
                answer=turn["answer"],
            )
    return golds


def load_predictions(path: Path) -> dict[tuple[str, int], str]:
    preds: dict[tuple[str, int], str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            key = (obj["image_id"], int(obj["turn_id"]))
            if key in preds:
                raise JoinError(f"duplicate prediction {key}")
            preds[key] = obj["answer"]
    return preds


def _gold_pairs(answer: str):
    doc, _ = parse(answer, "strict")
    return [(phrase, dequantize(box)) for phrase, box in extract_boxes(doc)]


def _pred_pairs(answer: str):
    doc, _ = parse(answer, "lenient")
    return [(phrase, dequantize(box)) for phrase, box in extract_boxes(doc)]


def _pred_text(answer: str) -> str:
    doc, _ = parse(answer, "lenient")
    return doc.plain_text()


def score_turn(
    gold: GoldTurn,
    prediction: str | None,
    ignore_phrase: bool = False,
    synonyms: dict[str, str] | None = None,
) -> float:
    """Score one turn; a missing prediction scores 0."""
    if prediction is None:
        return 0.0
    if gold.task == "VG":
        gold_pairs = _gold_pairs(gold.answer)
        pred_pairs = _pred_pairs(prediction)
        return recall_at(
            pred_pairs, gold_pairs, RECALL_THRESHOLD, ignore_phrase=ignore_phrase, synonyms=synonyms
        )
    gold_text = _pred_text(gold.answer)
    pred_text = _pred_text(prediction)
    if gold.task == "ROC":
        return float(roc_recall(pred_text, gold_text, synonyms))
    return mbmr(pred_text, gold_text)


@dataclass
class ScoringResult:
    table: ScoreTable
    samples: list[SampleScore]
    unmatched_predictions: list[tuple[str, int]]
    missing_predictions: int


def score_predictions(
    gold_records: Iterable[dict],
    predictions: dict[tuple[str, int], str],
    ignore_phrase: bool = False,
    synonyms: dict[str, str] | None = None,
) -> ScoringResult:
    golds = load_gold_turns(gold_records)
    samples: list[SampleScore] = []
    missing = 0
    for key, gold in golds.items():
        prediction = predictions.get(key)
        if prediction is None:
            missing += 1
        value = score_turn(gold, prediction, ignore_phrase, synonyms)
        samples.append(SampleScore(gold.image_id, gold.turn_id, gold.task, gold.modality, value))
    unmatched = sorted(k for k in predictions if k not in golds)
    return ScoringResult(aggregate(samples), samples, unmatched, missing)


def table_to_json(result: ScoringResult) -> dict:
    table = result.table
    cells: dict[str, dict[str, float]] = {}
    counts: dict[str, dict[str, int]] = {}
    for (task, modality), value in sorted(table.cells.items()):
        cells.setdefault(task, {})[modality] = value
        counts.setdefault(task, {})[modality] = table.counts[(task, modality)]
    return {
        "metric_labels": TASK_METRIC_LABELS,
        "cells": cells,
        "counts": counts,
        "row_avg": dict(sorted(table.row_avg.items())),
        "col_avg": dict(sorted(table.col_avg.items())),
        "missing_predictions": result.missing_predictions,
        "unmatched_predictions": [list(k) for k in result.unmatched_predictions],
    }


def table_from_json(obj: dict) -> ScoreTable:
    table = ScoreTable()
    for task, row in obj["cells"].items():
        for modality, value in row.items():
            table.cells[(task, modality)] = value
            table.counts[(task, modality)] = obj.get("counts", {}).get(task, {}).get(modality, 0)
    table.row_avg = dict(obj["row_avg"])
    table.col_avg = dict(obj["col_avg"])
    return table


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value * 100:.2f}"


def render_markdown(table: ScoreTable) -> str:
    header = ["", "Metric", *MODALITIES, "Average"]
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "---|" * len(header),
    ]
    for task in TASK_ORDER:
        row = [f"**{task}**", TASK_METRIC_LABELS[task]]
        row.extend(_fmt(table.cell(task, m)) for m in MODALITIES)
        row.append(_fmt(table.row_avg.get(task)))
        lines.append("| " + " | ".join(row) + " |")
    avg_row = ["**Average**", "-"]
    avg_row.extend(_fmt(table.col_avg.get(m)) for m in MODALITIES)
    avg_row.append("-")
    lines.append("| " + " | ".join(avg_row) + " |")
    return "\n".join(lines) + "\n"


def write_csv(table: ScoreTable, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "metric", *MODALITIES, "average"])
        for task in TASK_ORDER:
            writer.writerow(
                [
                    task,
                    TASK_METRIC_LABELS[task],
                    *(_fmt(table.cell(task, m)) for m in MODALITIES),
                    _fmt(table.row_avg.get(task)),
                ]
            )
        writer.writerow(
            ["average", "-", *(_fmt(table.col_avg.get(m)) for m in MODALITIES), "-"]
        )


def render_figures(table: ScoreTable, out_dir: Path) -> list[Path]:
    """Score heatmap and per-task average bars as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    out_dir.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []

    grid = np.full((len(TASK_ORDER), len(MODALITIES)), np.nan)
    for i, task in enumerate(TASK_ORDER):
        for j, modality in enumerate(MODALITIES):
            value = table.cell(task, modality)
            if value is not None:
                grid[i, j] = value * 100
    fig, ax = plt.subplots(figsize=(9, 3.2))
    masked = np.ma.masked_invalid(grid)
    cmap = plt.get_cmap("viridis").copy()
    cmap.set_bad("#dddddd")
    im = ax.imshow(masked, cmap=cmap, vmin=0, vmax=100, aspect="auto")
    ax.set_xticks(range(len(MODALITIES)), MODALITIES, rotation=30, ha="right")
    ax.set_yticks(range(len(TASK_ORDER)), TASK_ORDER)
    for i in range(len(TASK_ORDER)):
        for j in range(len(MODALITIES)):
            if not np.isnan(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.1f}", ha="center", va="center", fontsize=8)
            else:
                ax.text(j, i, "-", ha="center", va="center", fontsize=8, color="#666666")
    fig.colorbar(im, ax=ax, label="score x100")
    ax.set_title("Scores by task and modality")
    fig.tight_layout()
    heatmap_path = out_dir / "score_heatmap.png"
    fig.savefig(heatmap_path, dpi=150)
    plt.close(fig)
    paths.append(heatmap_path)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    tasks = [t for t in TASK_ORDER if t in table.row_avg]
    values = [table.row_avg[t] * 100 for t in tasks]
    ax.bar(tasks, values, color="#4878a8")
    for x, v in zip(tasks, values):
        ax.text(x, v + 1, f"{v:.2f}", ha="center", fontsize=8)
    ax.set_ylim(0, 105)
    ax.set_ylabel("score x100")
    ax.set_title("Per-task averages")
    fig.tight_layout()
    bars_path = out_dir / "task_averages.png"
    fig.savefig(bars_path, dpi=150)
    plt.close(fig)
    paths.append(bars_path)
    return paths


def write_report(result_json: dict, out_dir: Path, figures: bool = True) -> list[Path]:
    """Render report.json, report.md, report.csv, and figures into out_dir."""
    out_dir.mkdir(parents=True, exist_ok=True)
    table = table_from_json(result_json)
    written: list[Path] = []

    json_path = out_dir / "report.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(result_json, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(json_path)

    md_path = out_dir / "report.md"
    md_path.write_text(render_markdown(table), encoding="utf-8")
    written.append(md_path)

    csv_path = out_dir / "report.csv"
    write_csv(table, csv_path)
    written.append(csv_path)

    if figures:
        written.extend(render_figures(table, out_dir / "figures"))
    return written
