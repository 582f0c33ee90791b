from __future__ import annotations

import json
from pathlib import Path

import pytest

from gritforge.cli import EXIT_BACKEND, EXIT_CONFIG, EXIT_DATA, EXIT_OK, main

from conftest import write_mask


def _manifest_entry(image_id, mask_rel, width=8, height=8, case_id=None, modality="CT"):
    return {
        "image_id": image_id,
        "image": mask_rel,
        "mask": mask_rel,
        "case_id": case_id or image_id.rsplit("_", 1)[0],
        "modality": modality,
        "scanned_region": "abdomen",
        "orientation": "axial",
        "width": width,
        "height": height,
        "categories": [{"id": 1, "name": "liver"}, {"id": 2, "name": "kidney"}],
    }


def _write_corpus(tmp_path, n_images=3):
    grid = [[0] * 8 for _ in range(8)]
    for y in range(1, 5):
        for x in range(1, 5):
            grid[y][x] = 1
    entries = []
    for i in range(n_images):
        rel = f"m{i}.png"
        write_mask(tmp_path / rel, grid)
        entries.append(_manifest_entry(f"case{i}_s0", rel))
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(e) + "\n" for e in entries))
    return manifest


def _run_gen(tmp_path, manifest, out_name="dataset.jsonl", extra=()):
    meta = tmp_path / "meta.jsonl"
    captions = tmp_path / "captions.jsonl"
    dataset = tmp_path / out_name
    assert main(["ingest", "--manifest", str(manifest), "--out", str(meta), "--min-area", "1"]) == EXIT_OK
    assert main(["caption", "--meta", str(meta), "--out", str(captions)]) == EXIT_OK
    code = main(
        ["gen", "--meta", str(meta), "--captions", str(captions), "--out", str(dataset), *extra]
    )
    return code, dataset


class TestIngestCmd:
    def test_three_images_three_meta_lines(self, tmp_path, capsys):
        manifest = _write_corpus(tmp_path, 3)
        meta = tmp_path / "meta.jsonl"
        assert main(["ingest", "--manifest", str(manifest), "--out", str(meta)]) == EXIT_OK
        assert len(meta.read_text().splitlines()) == 3
        summary = json.loads(capsys.readouterr().out)
        assert summary["images"] == 3 and summary["per_modality"] == {"CT": 3}

    def test_corrupt_mask_diagnosed_and_exit_1(self, tmp_path, capsys):
        manifest = _write_corpus(tmp_path, 3)
        (tmp_path / "m1.png").write_bytes(b"not a png")
        meta = tmp_path / "meta.jsonl"
        assert main(["ingest", "--manifest", str(manifest), "--out", str(meta)]) == EXIT_DATA
        assert len(meta.read_text().splitlines()) == 2
        captured = capsys.readouterr()
        assert "case1_s0" in captured.err

    def test_empty_manifest_warns_exit_0(self, tmp_path, capsys):
        manifest = tmp_path / "manifest.jsonl"
        manifest.write_text("")
        meta = tmp_path / "meta.jsonl"
        assert main(["ingest", "--manifest", str(manifest), "--out", str(meta)]) == EXIT_OK
        assert meta.read_text() == ""
        assert "empty" in capsys.readouterr().err

    def test_missing_manifest_is_config_error(self, tmp_path):
        assert (
            main(["ingest", "--manifest", str(tmp_path / "nope.jsonl"), "--out", "x"])
            == EXIT_CONFIG
        )

    def test_jobs_flag_keeps_order(self, tmp_path):
        manifest = _write_corpus(tmp_path, 6)
        serial = tmp_path / "serial.jsonl"
        parallel = tmp_path / "parallel.jsonl"
        assert main(["ingest", "--manifest", str(manifest), "--out", str(serial)]) == EXIT_OK
        assert (
            main(["ingest", "--manifest", str(manifest), "--out", str(parallel), "--jobs", "4"])
            == EXIT_OK
        )
        assert serial.read_bytes() == parallel.read_bytes()


class TestGenCmd:
    def test_ten_images_forty_turns(self, tmp_path, capsys):
        manifest = _write_corpus(tmp_path, 10)
        code, dataset = _run_gen(tmp_path, manifest)
        assert code == EXIT_OK
        printed = capsys.readouterr().out
        assert '"total_turns": 40' in printed
        records = [json.loads(line) for line in dataset.read_text().splitlines()]
        assert sum(len(r["turns"]) for r in records) == 40

    def test_rerun_byte_identical(self, tmp_path):
        manifest = _write_corpus(tmp_path, 4)
        _, first = _run_gen(tmp_path, manifest, "a.jsonl")
        _, second = _run_gen(tmp_path, manifest, "b.jsonl")
        assert first.read_bytes() == second.read_bytes()

    def test_offline_llm_cold_cache_fails_without_output(self, tmp_path):
        manifest = _write_corpus(tmp_path, 2)
        meta = tmp_path / "meta.jsonl"
        captions = tmp_path / "captions.jsonl"
        main(["ingest", "--manifest", str(manifest), "--out", str(meta), "--min-area", "1"])
        main(["caption", "--meta", str(meta), "--out", str(captions)])
        dataset = tmp_path / "never.jsonl"
        code = main(
            [
                "gen", "--meta", str(meta), "--captions", str(captions), "--out", str(dataset),
                "--backend", "llm", "--offline", "--model", "m",
                "--cache-dir", str(tmp_path / "cache"),
            ]
        )
        assert code == EXIT_BACKEND
        assert not dataset.exists()

    def test_split_mode_writes_both_sides(self, tmp_path):
        manifest = _write_corpus(tmp_path, 10)
        meta = tmp_path / "meta.jsonl"
        captions = tmp_path / "captions.jsonl"
        split_path = tmp_path / "split.json"
        main(["ingest", "--manifest", str(manifest), "--out", str(meta), "--min-area", "1"])
        main(["caption", "--meta", str(meta), "--out", str(captions)])
        assert (
            main(["split", "--meta", str(meta), "--out", str(split_path), "--test-fraction", "0.2", "--seed", "1"])
            == EXIT_OK
        )
        train = tmp_path / "train.jsonl"
        test = tmp_path / "test.jsonl"
        code = main(
            [
                "gen", "--meta", str(meta), "--captions", str(captions),
                "--out", str(train), "--split", str(split_path), "--out-test", str(test),
            ]
        )
        assert code == EXIT_OK
        n_train = len(train.read_text().splitlines())
        n_test = len(test.read_text().splitlines())
        assert n_train + n_test == 10 and n_test == 2


class TestValidateCmd:
    def test_gen_output_validates(self, tmp_path):
        manifest = _write_corpus(tmp_path, 3)
        _, dataset = _run_gen(tmp_path, manifest)
        assert main(["validate", "--path", str(dataset)]) == EXIT_OK

    def test_corrupted_coordinate_fails(self, tmp_path, capsys):
        manifest = _write_corpus(tmp_path, 1)
        _, dataset = _run_gen(tmp_path, manifest)
        text = dataset.read_text()
        assert "(625,625)" in text
        dataset.write_text(text.replace("(625,625)", "(625,1400)"))
        assert main(["validate", "--path", str(dataset)]) == EXIT_DATA
        assert "OutOfRange" in capsys.readouterr().err

    def test_mia_with_ref_fails(self, tmp_path, capsys):
        manifest = _write_corpus(tmp_path, 1)
        _, dataset = _run_gen(tmp_path, manifest)
        record = json.loads(dataset.read_text())
        for turn in record["turns"]:
            if turn["task"] == "MIA":
                turn["answer"] = "<ref>x</ref><box>(1,2),(3,4)</box>"
        dataset.write_text(json.dumps(record) + "\n")
        assert main(["validate", "--path", str(dataset)]) == EXIT_DATA
        assert "ref" in capsys.readouterr().err


def _echo_preds(dataset: Path, pred_path: Path, mutate=None):
    with open(pred_path, "w") as fh:
        for line in open(dataset):
            record = json.loads(line)
            for turn in record["turns"]:
                answer = turn["answer"]
                if mutate:
                    answer = mutate(turn["task"], answer)
                fh.write(
                    json.dumps(
                        {
                            "image_id": record["image_id"],
                            "turn_id": turn["turn_id"],
                            "task": turn["task"],
                            "answer": answer,
                        }
                    )
                    + "\n"
                )


class TestScoreCmd:
    def test_echo_predictions_scores(self, tmp_path, capsys):
        manifest = _write_corpus(tmp_path, 4)
        _, dataset = _run_gen(tmp_path, manifest)
        preds = tmp_path / "preds.jsonl"
        _echo_preds(dataset, preds)
        out = tmp_path / "scored"
        code = main(
            ["score", "--pred", str(preds), "--gold", str(dataset), "--out", str(out), "--no-figures"]
        )
        assert code == EXIT_OK
        payload = json.loads((out / "report.json").read_text())
        assert payload["cells"]["VG"]["CT"] == 1.0
        assert payload["cells"]["ROC"]["CT"] == 1.0
        # identical-text mBMR via the meteor closed form 1 - 0.5/m^3
        from gritforge.metrics import tokenize

        gold_record = json.loads(dataset.read_text().splitlines()[0])
        mia_answers = [t["answer"] for t in gold_record["turns"] if t["task"] == "MIA"]
        m = len(tokenize(mia_answers[0]))
        expected = (1.0 + 1.0 + (1.0 - 0.5 / m**3)) / 3.0
        assert payload["cells"]["MIA"]["CT"] == pytest.approx(expected, abs=1e-12)

    def test_empty_predictions_all_zero(self, tmp_path):
        manifest = _write_corpus(tmp_path, 2)
        _, dataset = _run_gen(tmp_path, manifest)
        preds = tmp_path / "preds.jsonl"
        preds.write_text("")
        out = tmp_path / "scored"
        main(["score", "--pred", str(preds), "--gold", str(dataset), "--out", str(out), "--no-figures"])
        payload = json.loads((out / "report.json").read_text())
        for row in payload["cells"].values():
            for value in row.values():
                assert value == 0.0

    def test_boundary_iou_scored_as_miss(self, tmp_path):
        manifest = _write_corpus(tmp_path, 1)
        _, dataset = _run_gen(tmp_path, manifest)
        record = json.loads(dataset.read_text())
        for turn in record["turns"]:
            if turn["task"] == "VG":
                turn["answer"] = "<ref>liver</ref><box>(0,0),(500,500)</box>"
        dataset.write_text(json.dumps(record) + "\n")
        preds = tmp_path / "preds.jsonl"

        def halve(task, answer):
            if task == "VG":
                return "<ref>liver</ref><box>(0,0),(500,250)</box>"
            return answer

        _echo_preds(dataset, preds, mutate=halve)
        out = tmp_path / "scored"
        main(["score", "--pred", str(preds), "--gold", str(dataset), "--out", str(out), "--no-figures"])
        payload = json.loads((out / "report.json").read_text())
        assert payload["cells"]["VG"]["CT"] == 0.0


class TestReportCmd:
    def test_rerender_from_saved_json(self, tmp_path):
        manifest = _write_corpus(tmp_path, 2)
        _, dataset = _run_gen(tmp_path, manifest)
        preds = tmp_path / "preds.jsonl"
        _echo_preds(dataset, preds)
        first = tmp_path / "scored"
        main(["score", "--pred", str(preds), "--gold", str(dataset), "--out", str(first), "--no-figures"])
        second = tmp_path / "rerender"
        code = main(
            ["report", "--scores", str(first / "report.json"), "--out", str(second), "--no-figures"]
        )
        assert code == EXIT_OK
        assert (second / "report.md").read_bytes() == (first / "report.md").read_bytes()
        assert (second / "report.csv").read_bytes() == (first / "report.csv").read_bytes()


class TestSynthCmd:
    def test_deterministic_output(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert (
                main(
                    ["synth", "--out", str(out), "--seed", "11",
                     "--cases-per-modality", "1", "--slices-per-case", "2"]
                )
                == EXIT_OK
            )
        assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
        masks_a = sorted(p.name for p in (a / "masks").iterdir())
        assert masks_a == sorted(p.name for p in (b / "masks").iterdir())
        for name in masks_a:
            assert (a / "masks" / name).read_bytes() == (b / "masks" / name).read_bytes()
