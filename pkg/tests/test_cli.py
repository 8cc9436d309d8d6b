import json
import os

import pytest

from oavl.cli import EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from oavl.synth import read_manifest

from conftest import make_record


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-ds")
    code = main(
        [
            "synth", "--n", "16", "--seed", "7", "--out-dir", str(out),
            "--height", "32", "--width", "32",
        ]
    )
    assert code == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("cli-train")
    ckpt = out / "model.bin"
    report = out / "report.json"
    code = main(
        [
            "train", "--manifest", str(dataset_dir / "manifest.jsonl"),
            "--out", str(ckpt), "--report", str(report),
            "--epochs", "1", "--batch-size", "4", "--seed", "3", "--quiet",
        ]
    )
    assert code == EXIT_OK
    return ckpt, report


class TestSynth:
    def test_writes_manifest_and_images(self, dataset_dir):
        manifest = read_manifest(str(dataset_dir / "manifest.jsonl"))
        assert len(manifest.entries) == 16
        images = list((dataset_dir / "images").glob("*.pgm"))
        assert len(images) == 16

    def test_missing_out_dir_flag(self):
        assert main(["synth", "--n", "12"]) == EXIT_VALIDATION

    def test_bad_ratios(self, tmp_path):
        code = main(
            ["synth", "--n", "12", "--out-dir", str(tmp_path), "--ratios", "0.9,0.9,0.2"]
        )
        assert code == EXIT_VALIDATION


class TestCaptions:
    def test_from_record_json(self, tmp_path):
        record = make_record(kl=2, osteophytes={"fm": 2})
        src = tmp_path / "record.json"
        src.write_text(json.dumps(record.to_json_dict()))
        out = tmp_path / "captions.jsonl"
        assert main(["captions", "--record", str(src), "--out", str(out)]) == EXIT_OK
        lines = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(lines) == 3
        assert {line["kind"] for line in lines} == {"abnormality", "location", "overall"}
        assert all(line["id"] == "r0" for line in lines)

    def test_from_manifest(self, dataset_dir, tmp_path):
        out = tmp_path / "captions.jsonl"
        code = main(
            ["captions", "--manifest", str(dataset_dir / "manifest.jsonl"), "--out", str(out)]
        )
        assert code == EXIT_OK
        assert len(out.read_text().splitlines()) == 16 * 3

    def test_needs_exactly_one_source(self, tmp_path):
        out = tmp_path / "c.jsonl"
        assert main(["captions", "--out", str(out)]) == EXIT_VALIDATION


class TestTrain:
    def test_missing_manifest_is_io_error(self, tmp_path):
        ckpt = tmp_path / "m.bin"
        code = main(
            ["train", "--manifest", str(tmp_path / "missing.jsonl"), "--out", str(ckpt)]
        )
        assert code == EXIT_IO
        assert not ckpt.exists()

    def test_writes_checkpoint_and_report(self, trained):
        ckpt, report = trained
        assert ckpt.exists()
        payload = json.loads(report.read_text())
        assert len(payload["epochs"]) == 1
        assert "initial_neg_cosine" in payload

    def test_determinism_across_runs(self, dataset_dir, tmp_path):
        blobs = []
        for name in ("a", "b"):
            ckpt = tmp_path / f"{name}.bin"
            code = main(
                [
                    "train", "--manifest", str(dataset_dir / "manifest.jsonl"),
                    "--out", str(ckpt), "--epochs", "1", "--batch-size", "4",
                    "--seed", "11", "--quiet",
                ]
            )
            assert code == EXIT_OK
            blobs.append(ckpt.read_bytes())
        assert blobs[0] == blobs[1]

    def test_config_file_with_flag_override(self, dataset_dir, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"epochs": 1, "batch_size": 4, "seed": 2}))
        ckpt = tmp_path / "c.bin"
        code = main(
            [
                "--config", str(config),
                "train", "--manifest", str(dataset_dir / "manifest.jsonl"),
                "--out", str(ckpt), "--quiet",
            ]
        )
        assert code == EXIT_OK

    def test_unknown_config_key_rejected(self, dataset_dir, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"learning_rate": 1.0}))
        code = main(
            [
                "--config", str(config),
                "train", "--manifest", str(dataset_dir / "manifest.jsonl"),
                "--out", str(tmp_path / "x.bin"), "--quiet",
            ]
        )
        assert code == EXIT_VALIDATION


class TestEvalAndSaliency:
    def test_zero_shot_eval_writes_report(self, dataset_dir, trained, tmp_path):
        ckpt, _ = trained
        out = tmp_path / "eval"
        code = main(
            [
                "eval", "zero-shot", "--checkpoint", str(ckpt),
                "--manifest", str(dataset_dir / "manifest.jsonl"), "--out", str(out),
            ]
        )
        assert code == EXIT_OK
        payload = json.loads((out / "report.json").read_text())
        assert "zero_shot" in payload
        assert (out / "confusion.csv").exists()

    def test_retrieval_eval(self, dataset_dir, trained, tmp_path):
        ckpt, _ = trained
        out = tmp_path / "retr"
        code = main(
            [
                "eval", "retrieval", "--checkpoint", str(ckpt),
                "--manifest", str(dataset_dir / "manifest.jsonl"),
                "--out", str(out), "--k", "2", "--baseline-draws", "50",
            ]
        )
        assert code == EXIT_OK
        payload = json.loads((out / "report.json").read_text())
        assert "retrieval" in payload

    def test_eval_without_task(self, trained, dataset_dir):
        assert main(["eval"]) == EXIT_VALIDATION

    def test_saliency_writes_overlay(self, dataset_dir, trained, tmp_path):
        ckpt, _ = trained
        manifest = read_manifest(str(dataset_dir / "manifest.jsonl"))
        record_id = manifest.entries[0].record.id
        out = tmp_path / "sal"
        code = main(
            [
                "saliency", "--checkpoint", str(ckpt),
                "--manifest", str(dataset_dir / "manifest.jsonl"),
                "--id", record_id, "--prompt", "severe osteoarthritis.",
                "--out", str(out),
            ]
        )
        assert code == EXIT_OK
        assert (out / "saliency" / f"{record_id}.pgm").exists()

    def test_corrupt_checkpoint_is_io_error(self, dataset_dir, trained, tmp_path):
        ckpt, _ = trained
        bad = tmp_path / "bad.bin"
        blob = bytearray(ckpt.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        bad.write_bytes(bytes(blob))
        code = main(
            [
                "eval", "zero-shot", "--checkpoint", str(bad),
                "--manifest", str(dataset_dir / "manifest.jsonl"),
                "--out", str(tmp_path / "e"),
            ]
        )
        assert code == EXIT_IO


class TestInspect:
    def test_lists_model_tensors(self, trained, capsys):
        ckpt, _ = trained
        assert main(["inspect", str(ckpt)]) == EXIT_OK
        out = capsys.readouterr().out
        lines = [line.split("\t") for line in out.strip().splitlines()]
        names = {line[0] for line in lines}
        assert "image.conv1.weight" in names
        assert "log_temperature" in names
        assert "optim.image.conv1.weight.m" in names
        assert "meta.config_json" in names

    def test_unknown_command_exits_one(self):
        assert main(["frobnicate"]) == EXIT_VALIDATION

    def test_no_command_prints_usage(self, capsys):
        assert main([]) == EXIT_VALIDATION
        assert "usage" in capsys.readouterr().err.lower()
