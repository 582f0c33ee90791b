"""grit-forge command line: synth | ingest | caption | gen | split | validate | score | report.

Exit codes: 0 success, 1 data violations, 2 configuration errors,
3 backend/transport errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import conversations, gateway, ingest, report, split as splitmod, synth
from .conversations import (
    BackendUnavailableError,
    LlmBackend,
    SplitCoverageGapError,
    TaskKind,
    TemplateBackend,
)

EXIT_OK = 0
EXIT_DATA = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3


class ConfigError(Exception):
    pass


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"path does not exist: {p}")
    return p


def _parallel_map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _parse_tasks(raw: str) -> list[TaskKind]:
    try:
        return [TaskKind(part.strip().upper()) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad task list {raw!r}: {exc}") from exc


def _make_backend(args) -> TemplateBackend | LlmBackend:
    if args.backend == "template":
        return TemplateBackend(object_cap=args.object_cap)
    client = gateway.ChatClient.from_env(
        cache_dir=Path(args.cache_dir),
        offline=args.offline,
        requests_per_minute=args.rpm,
    )
    model = args.model or os.environ.get(gateway.ENV_MODEL)
    if not model:
        raise ConfigError(f"--model or {gateway.ENV_MODEL} required for the llm backend")
    return LlmBackend(client, model=model, temperature=args.temperature)


def _sampled_metas(metas, max_per_case: int, dedup_threshold: float):
    """Apply per-case slice sampling, preserving meta order within cases."""
    metas = list(metas)
    by_id = {m.image_id: m for m in metas}
    groups = splitmod.group_cases(metas)
    kept: set[str] = set()
    for group in groups:
        kept.update(splitmod.sample_slices(group, by_id, max_per_case, dedup_threshold))
    return [m for m in metas if m.image_id in kept]


def cmd_synth(args) -> int:
    config = synth.SynthConfig(
        out_dir=Path(args.out),
        seed=args.seed,
        cases_per_modality=args.cases_per_modality,
        slices_per_case=args.slices_per_case,
        size=args.size,
    )
    counts = synth.generate_corpus(config)
    print(json.dumps(counts, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_ingest(args) -> int:
    manifest_path = _existing(args.manifest)
    root = Path(args.root) if args.root else manifest_path.parent
    entries = list(ingest.read_manifest(manifest_path))
    if not entries:
        print("warning: manifest is empty, wrote 0 meta records", file=sys.stderr)
        Path(args.out).write_text("", encoding="utf-8")
        return EXIT_OK

    def work(entry):
        try:
            meta = ingest.ingest_image(
                entry,
                root=root,
                connectivity=args.connectivity,
                min_area=args.min_area,
                merge_per_category=args.merge_per_category,
            )
            return meta, None
        except Exception as exc:  # per-image diagnostics, keep going
            return None, f"{entry.image_id}: {type(exc).__name__}: {exc}"

    results = _parallel_map(work, entries, args.jobs)
    errors = [diag for _, diag in results if diag]
    metas = [meta for meta, _ in results if meta is not None]
    ingest.write_metas(metas, Path(args.out))
    per_modality: dict[str, int] = {}
    for meta in metas:
        per_modality[meta.modality] = per_modality.get(meta.modality, 0) + 1
    for diag in errors:
        print(f"error: {diag}", file=sys.stderr)
    print(
        json.dumps(
            {"images": len(metas), "per_modality": per_modality, "errors": len(errors)},
            indent=2,
            sort_keys=True,
        )
    )
    return EXIT_DATA if errors else EXIT_OK


def cmd_caption(args) -> int:
    metas = list(ingest.read_metas(_existing(args.meta)))
    backend = _make_backend(args)
    out = Path(args.out)
    try:
        with open(out, "w", encoding="utf-8") as fh:
            for meta in metas:
                caption = conversations.build_caption(meta, backend)
                fh.write(
                    json.dumps(
                        {"image_id": meta.image_id, "caption": caption}, ensure_ascii=False
                    )
                    + "\n"
                )
    except BackendUnavailableError:
        out.unlink(missing_ok=True)
        raise
    print(json.dumps({"captions": len(metas)}))
    return EXIT_OK


def _read_captions(path: Path) -> dict[str, str]:
    captions: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                obj = json.loads(line)
                captions[obj["image_id"]] = obj["caption"]
    return captions


def cmd_gen(args) -> int:
    metas = _sampled_metas(
        ingest.read_metas(_existing(args.meta)), args.max_per_case, args.dedup_threshold
    )
    captions = _read_captions(_existing(args.captions))
    tasks = _parse_tasks(args.tasks)
    if not tasks:
        raise ConfigError("no tasks requested")
    backend = _make_backend(args)
    assignment = None
    out_test = None
    if args.split:
        assignment = splitmod.read_split(_existing(args.split))
        if not args.out_test:
            raise ConfigError("--out-test required together with --split")
        out_test = Path(args.out_test)
    out = Path(args.out)
    try:
        stats = conversations.build_dataset(
            metas, captions, tasks, backend, out, split=assignment, test_out_path=out_test
        )
    except Exception:
        out.unlink(missing_ok=True)
        if out_test is not None:
            out_test.unlink(missing_ok=True)
        raise
    print(json.dumps(stats.to_json(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_split(args) -> int:
    metas = _sampled_metas(
        ingest.read_metas(_existing(args.meta)), args.max_per_case, args.dedup_threshold
    )
    if not (0.0 < args.test_fraction < 1.0):
        raise ConfigError(f"--test-fraction must be in (0,1), got {args.test_fraction}")
    groups = splitmod.group_cases(metas)
    if not groups:
        raise ConfigError("no cases found in meta file")
    assignment = splitmod.split_cases(groups, args.test_fraction, args.seed)
    splitmod.write_split(assignment, Path(args.out))
    summary = {
        "cases": len(groups),
        "train_cases": len(assignment.train),
        "test_cases": len(assignment.test),
        "achieved_test_fraction": assignment.achieved_test_fraction,
        "stratum_fractions": dict(sorted(assignment.stratum_fractions.items())),
    }
    for modality, fraction in sorted(assignment.stratum_fractions.items()):
        if fraction > args.test_fraction * 2:
            print(
                f"warning: stratum {modality} overshoots the target "
                f"({fraction:.3f} vs {args.test_fraction:.3f}); a single case "
                "exceeded the stratum target",
                file=sys.stderr,
            )
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_validate(args) -> int:
    path = _existing(args.path)
    violations = 0
    records = 0
    for lineno, obj in enumerate(conversations.read_records(path), start=1):
        records += 1
        for message in conversations.validate_record(obj):
            violations += 1
            print(f"{path}:{lineno}: {message}", file=sys.stderr)
    print(json.dumps({"records": records, "violations": violations}))
    return EXIT_DATA if violations else EXIT_OK


def _load_synonyms(path: str | None) -> dict[str, str] | None:
    if not path:
        return None
    with open(_existing(path), encoding="utf-8") as fh:
        return json.load(fh)


def cmd_score(args) -> int:
    gold_records = conversations.read_records(_existing(args.gold))
    predictions = report.load_predictions(_existing(args.pred))
    result = report.score_predictions(
        gold_records,
        predictions,
        ignore_phrase=args.ignore_phrase,
        synonyms=_load_synonyms(args.synonyms),
    )
    payload = report.table_to_json(result)
    written = report.write_report(payload, Path(args.out), figures=not args.no_figures)
    print(report.render_markdown(result.table))
    for path in written:
        print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    with open(_existing(args.scores), encoding="utf-8") as fh:
        payload = json.load(fh)
    written = report.write_report(payload, Path(args.out), figures=not args.no_figures)
    table = report.table_from_json(payload)
    print(report.render_markdown(table))
    for path in written:
        print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--backend", choices=("template", "llm"), default="template")
    parser.add_argument("--offline", action="store_true", help="serve LLM calls from cache only")
    parser.add_argument("--cache-dir", default=".grit_cache")
    parser.add_argument("--model", default=None)
    parser.add_argument("--temperature", type=float, default=0.2)
    parser.add_argument("--rpm", type=float, default=60.0, help="LLM requests per minute")
    parser.add_argument("--object-cap", type=int, default=conversations.DEFAULT_OBJECT_CAP)


def _add_sampling_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--max-per-case", type=int, default=splitmod.DEFAULT_MAX_PER_CASE)
    parser.add_argument(
        "--dedup-threshold", type=float, default=splitmod.DEFAULT_DEDUP_THRESHOLD
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grit-forge",
        description="Refer-and-ground conversation dataset pipeline and scoring harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases-per-modality", type=int, default=3)
    p.add_argument("--slices-per-case", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="decode masks and write per-image meta records")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--root", default=None, help="base dir for mask paths (default: manifest dir)")
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=ingest.DEFAULT_CONNECTIVITY)
    p.add_argument("--min-area", type=int, default=ingest.DEFAULT_MIN_AREA)
    p.add_argument("--merge-per-category", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("caption", help="write one caption per meta record")
    p.add_argument("--meta", required=True)
    p.add_argument("--out", required=True)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("gen", help="build conversation records from metas + captions")
    p.add_argument("--meta", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None, help="split JSON; writes train to --out")
    p.add_argument("--out-test", default=None)
    p.add_argument("--tasks", default="ROC,RC,VG,MIA")
    _add_backend_flags(p)
    _add_sampling_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("split", help="leakage-free case-level train/test split")
    p.add_argument("--meta", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-fraction", type=float, default=0.12)
    p.add_argument("--seed", type=int, default=0)
    _add_sampling_flags(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("validate", help="check a dataset JSONL against the format contract")
    p.add_argument("--path", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("score", help="score predictions against gold turns and render reports")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ignore-phrase", action="store_true", help="match VG boxes by geometry only")
    p.add_argument("--synonyms", default=None, help="JSON file mapping label variants")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="re-render reports from a saved report.json")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BackendUnavailableError, gateway.GatewayError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (SplitCoverageGapError, KeyError, ValueError) as exc:
        # data-shaped failures: bad manifests, markup, joins, invariants
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
