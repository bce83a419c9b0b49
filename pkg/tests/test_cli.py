import csv
import json
import subprocess
import sys

import pytest

from dynfusion import cli
from dynfusion.checkpoint import Checkpoint


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_corpus")
    assert cli.main(["synth", "--subjects", "20", "--seconds", "0.2", "--seed", "2", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    argv = ["train", "--manifest", str(corpus / "manifest.jsonl"), "--max-epochs", "1", "--seed", "5",
            "--out", str(out)]
    assert cli.main(argv) == 0
    return out


class TestSynth:
    def test_twenty_subjects(self, corpus, capsys):
        lines = (corpus / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 60
        stamp = json.loads((corpus / cli.STAMP_NAME).read_text())
        assert stamp["subjects"] == 20 and stamp["command"] == "synth"

    def test_requires_out(self, capsys):
        assert cli.main(["synth", "--subjects", "4"]) == cli.EXIT_USAGE


class TestUsage:
    @pytest.mark.parametrize("argv", [["synth", "--bogus"], ["train", "--manifest", "m", "--max-epochs", "500"],
                                      ["eval", "--manifest", "m", "--task", "7"], [], ["frobnicate"]])
    def test_bad_flags(self, argv, capsys):
        assert cli.main(argv) == cli.EXIT_USAGE
        assert "usage" in capsys.readouterr().err.lower()

    def test_console_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "dynfusion.cli", "synth", "--subjects", "x"],
                              capture_output=True, text=True)
        assert proc.returncode == cli.EXIT_USAGE and "usage" in proc.stderr.lower()

    def test_version(self, capsys):
        assert cli.main(["--version"]) == 0

    def test_missing_manifest(self, tmp_path, capsys):
        argv = ["train", "--manifest", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)]
        assert cli.main(argv) == cli.EXIT_DATA


class TestTrain:
    def test_checkpoints_and_histories(self, trained):
        for task in (0, 1, 2):
            for stage in (1, 2, 3):
                assert (trained / f"task{task}_stage{stage}.ckpt").exists()
                assert len(rows(trained / f"task{task}_stage{stage}_history.csv")) == 2
        stamp = json.loads((trained / cli.STAMP_NAME).read_text())
        assert stamp["plan"]["max_epochs"] == 1 and stamp["seed"] == 5

    def test_rerun_is_bit_identical(self, corpus, trained, tmp_path):
        argv = ["train", "--manifest", str(corpus / "manifest.jsonl"), "--max-epochs", "1", "--seed", "5",
                "--task", "1", "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        for stage in (1, 2, 3):
            name = f"task1_stage{stage}.ckpt"
            assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()

    def test_stage_three_without_prerequisites(self, corpus, tmp_path, capsys):
        argv = ["train", "--manifest", str(corpus / "manifest.jsonl"), "--stage", "3", "--out", str(tmp_path)]
        assert cli.main(argv) == cli.EXIT_FAILURE
        assert "stage" in capsys.readouterr().err

    def test_stage_by_stage_matches_all(self, corpus, trained, tmp_path):
        base = ["train", "--manifest", str(corpus / "manifest.jsonl"), "--max-epochs", "1", "--seed", "5",
                "--task", "2", "--out", str(tmp_path)]
        for stage in ("1", "2", "3"):
            assert cli.main(base + ["--stage", stage]) == 0
        a = Checkpoint.load(tmp_path / "task2_stage3.ckpt")
        b = Checkpoint.load(trained / "task2_stage3.ckpt")
        assert all(a[n].tobytes() == b[n].tobytes() for n in b.names())

    def test_overrides(self, corpus, tmp_path):
        argv = ["train", "--manifest", str(corpus / "manifest.jsonl"), "--max-epochs", "1", "--task", "0",
                "--stage", "1", "--lr", "1=1e-3", "--batch-size", "1=4", "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        plan = json.loads((tmp_path / cli.STAMP_NAME).read_text())["plan"]
        assert plan["lr"]["1"] == [1e-3, 1e-3, 1e-3] and plan["batch_size"]["1"] == 4


class TestEval:
    def test_tables(self, corpus, trained, tmp_path, capsys):
        argv = ["eval", "--manifest", str(corpus / "manifest.jsonl"), "--checkpoints", str(trained), "--ablate",
                "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        acc = rows(tmp_path / "table_accuracy.csv")
        assert [r["system"] for r in acc] == ["Task 0 (ER)", "Task 1 (PR)", "Task 2 (ED)", "Combined"]
        ablation = rows(tmp_path / "table_ablation.csv")
        assert len(ablation) == 6
        assert ablation[-1]["feature"] == "Text & Mel & Waveform"
        assert ablation[-1]["accuracy"] == acc[-1]["accuracy"]
        assert len(rows(tmp_path / "modality_importance.csv")) == 3
        assert (tmp_path / cli.STAMP_NAME).exists()

    def test_untrained_near_chance(self, corpus, tmp_path):
        argv = ["eval", "--manifest", str(corpus / "manifest.jsonl"), "--untrained", "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        for r in rows(tmp_path / "table_accuracy.csv"):
            assert 0.25 <= float(r["accuracy"]) <= 0.75

    def test_ablate_needs_all_tasks(self, corpus, trained, tmp_path):
        argv = ["eval", "--manifest", str(corpus / "manifest.jsonl"), "--checkpoints", str(trained), "--task",
                "0", "--ablate", "--out", str(tmp_path)]
        assert cli.main(argv) == cli.EXIT_USAGE


class TestExtract:
    def test_mfcc_csv(self, corpus, tmp_path):
        argv = ["extract", "--manifest", str(corpus / "manifest.jsonl"), "--task", "0", "--kind", "mfcc",
                "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        files = list(tmp_path.glob("*.mfcc.csv"))
        assert len(files) == 20


class TestParams:
    def test_report(self, tmp_path, capsys):
        assert cli.main(["params", "--out", str(tmp_path)]) == 0
        values = {r["quantity"]: float(r["value"]) for r in rows(tmp_path / "params.csv")}
        assert 0.78 <= values["time_encoder_reduction"] <= 0.84
        assert values["desk_model_analytic"] == values["desk_model_instantiated"]
        assert "time_encoder_reduction" in capsys.readouterr().out

    def test_no_stamp_without_out(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert cli.main(["params"]) == 0
        assert not list(tmp_path.iterdir())


class TestGradcheck:
    def test_passes(self, capsys):
        assert cli.main(["gradcheck", "--instances", "2", "--model-instances", "1"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") == 32

    def test_corrupted_backward_fails(self, capsys):
        assert cli.main(["gradcheck", "--instances", "2", "--model-instances", "1", "--corrupt", "tanh"]) == 3
        assert "FAIL" in capsys.readouterr().out
