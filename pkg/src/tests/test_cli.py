"""
End-to-end tests for the phaseprof command line

Runs the commands through click's CliRunner and checks outputs, manifests
and the documented exit codes.
"""

import json
import logging

import numpy as np
import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from cli import cli
from services.evaluation_service import METRICS_FILE, TABLE1_FILE, TABLE2_FILE
from services.training_service import CHECKPOINT_FILE, EPOCH_LOG_FILE
from utils.containers import read_patches, write_patches
from utils.validation import NumericalError


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture(autouse=True)
def restore_root_logger():
    """The CLI reconfigures the root logger onto CliRunner streams that close after each run."""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in list(root.handlers):
        root.removeHandler(handler)
    for handler in handlers:
        root.addHandler(handler)
    root.setLevel(level)


@pytest.fixture
def model_yaml(tmp_path):
    path = tmp_path / "mini.yaml"
    path.write_text(yaml.safe_dump({
        "in_channels": 20,
        "embed_dim": 4,
        "height_dim": 38,
        "scales": ["1", "1/2"],
        "encoder_depth": 1,
        "gen_channels": 4,
    }))
    return path


def invoke(runner: CliRunner, *args: str):
    return runner.invoke(cli, [str(a) for a in args], catch_exceptions=False)


# ============================================================
# Data commands
# ============================================================

class TestSynthCommand:

    def test_deterministic_output(self, runner, tmp_path):
        a, b = tmp_path / "a.cptx", tmp_path / "b.cptx"
        assert invoke(runner, "synth", "--scenes", 3, "--size", 16, "--seed", 5, "--out", a).exit_code == 0
        assert invoke(runner, "synth", "--scenes", 3, "--size", 16, "--seed", 5, "--out", b).exit_code == 0
        assert a.read_bytes() == b.read_bytes()

        manifest = json.loads((tmp_path / "a.cptx.manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 5
        assert manifest["summary"]["patches"] == 3

    def test_run_id_follows_parameters(self, runner, tmp_path):
        def run_id(name, *args):
            out = tmp_path / name
            assert invoke(runner, "synth", "--size", 16, "--out", out, *args).exit_code == 0
            return json.loads((tmp_path / f"{name}.manifest.json").read_text())["run_id"]

        first = run_id("a.cptx", "--scenes", 1, "--seed", 3)
        assert run_id("b.cptx", "--scenes", 1, "--seed", 3) == first
        assert run_id("c.cptx", "--scenes", 1, "--seed", 4) != first
        assert run_id("d.cptx", "--scenes", 2, "--seed", 3) != first

    def test_zero_scenes(self, runner, tmp_path):
        out = tmp_path / "empty.cptx"
        result = invoke(runner, "synth", "--scenes", 0, "--out", out)
        assert result.exit_code == 0
        assert read_patches(out) == []

    def test_negative_count(self, runner, tmp_path):
        out = tmp_path / "neg.cptx"
        assert invoke(runner, "synth", "--scenes", -1, "--out", out).exit_code == 1
        assert not out.exists()

    def test_unknown_flag(self, runner, tmp_path):
        assert invoke(runner, "synth", "--bogus", "--out", tmp_path / "x.cptx").exit_code == 1

    def test_unknown_command(self, runner):
        assert invoke(runner, "transmogrify").exit_code == 1


class TestCollocateCommand:

    def test_recovers_synthetic_tracks(self, runner, tmp_path):
        synth_out = tmp_path / "synth.cptx"
        export = tmp_path / "export"
        result = invoke(runner, "synth", "--scenes", 2, "--size", 32, "--seed", 1,
                        "--export-dir", export, "--out", synth_out)
        assert result.exit_code == 0
        assert (export / "tracks.csv").exists()

        collocated = tmp_path / "collocated.cptx"
        result = invoke(runner, "collocate", "--scenes", export, "--tracks", export / "tracks.csv",
                        "--patch", 32, "--out", collocated)
        assert result.exit_code == 0, result.output

        expected = sorted(int(p.mask.sum()) for p in read_patches(synth_out))
        found = sorted(int(p.mask.sum()) for p in read_patches(collocated))
        assert found == expected
        assert (tmp_path / "collocated.cptx.manifest.json").exists()

    def test_negative_window(self, runner, tmp_path):
        export = tmp_path / "export"
        invoke(runner, "synth", "--scenes", 1, "--size", 16, "--export-dir", export, "--out", tmp_path / "s.cptx")
        result = invoke(runner, "collocate", "--scenes", export, "--tracks", export / "tracks.csv",
                        "--window-min", -1, "--out", tmp_path / "c.cptx")
        assert result.exit_code == 1

    def test_missing_scene_dir(self, runner, tmp_path):
        tracks = tmp_path / "t.csv"
        tracks.write_text("")
        result = invoke(runner, "collocate", "--scenes", tmp_path / "absent", "--tracks", tracks,
                        "--out", tmp_path / "c.cptx")
        assert result.exit_code == 1


class TestStatsCommand:

    def test_writes_summary(self, runner, tmp_path, synth_file):
        out = tmp_path / "stats"
        assert invoke(runner, "stats", "--data", synth_file, "--out", out, "--dense").exit_code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["num_patches"] == 10
        assert sum(summary["phase_fractions"].values()) == pytest.approx(1.0)
        coverage = pd.read_csv(out / "coverage.csv")
        assert len(coverage) == 38
        assert (out / "densities.html").exists()
        assert (out / "manifest.json").exists()


# ============================================================
# Model commands
# ============================================================

class TestPipeline:

    def test_synth_train_predict_eval_report(self, runner, tmp_path, model_yaml):
        data = tmp_path / "data.cptx"
        assert invoke(runner, "synth", "--scenes", 10, "--size", 16, "--seed", 2, "--out", data).exit_code == 0

        for architecture in ("sgmagnet", "baseline"):
            ckpt = tmp_path / f"ckpt_{architecture}"
            result = invoke(runner, "train", "--data", data, "--config", model_yaml, "--out", ckpt,
                            "--architecture", architecture, "--epochs", 1, "--batch-size", 4, "--seed", 0)
            assert result.exit_code == 0, result.output
            assert (ckpt / CHECKPOINT_FILE).exists()
            assert len(pd.read_csv(ckpt / EPOCH_LOG_FILE)) == 1
            split = json.loads((ckpt / "split.json").read_text())
            assert sorted(split["train"] + split["val"] + split["test"]) == list(range(10))

            pred = tmp_path / f"pred_{architecture}.cptx"
            result = invoke(runner, "predict", "--ckpt", ckpt, "--data", data, "--out", pred, "--subset", "test")
            assert result.exit_code == 0, result.output
            predicted = read_patches(pred)
            assert len(predicted) == len(split["test"])
            assert all(p.prediction is not None and p.prediction.shape == (38, 16, 16) for p in predicted)

            result = invoke(runner, "eval", "--pred", pred, "--data", data, "--dense",
                            "--name", architecture, "--out", tmp_path / "eval" / architecture)
            assert result.exit_code in (0, 2), result.output
            assert (tmp_path / "eval" / architecture / METRICS_FILE).exists()

        report = tmp_path / "report"
        result = invoke(runner, "report", "--in", tmp_path / "eval", "--out", report)
        assert result.exit_code in (0, 2)
        table1 = pd.read_csv(report / TABLE1_FILE)
        table2 = pd.read_csv(report / TABLE2_FILE)
        assert sorted(table1["Models"]) == ["baseline", "sgmagnet"]
        assert len(table2) == 2

    def test_train_numerical_failure_exits_3(self, runner, tmp_path, model_yaml, synth_file, mocker):
        mocker.patch("services.training_service.adam_step", side_effect=NumericalError("adam_step", "overflow"))
        ckpt = tmp_path / "ckpt"
        result = invoke(runner, "train", "--data", synth_file, "--config", model_yaml, "--out", ckpt,
                        "--epochs", 1, "--batch-size", 4)
        assert result.exit_code == 3
        assert not (ckpt / CHECKPOINT_FILE).exists()

    def test_subset_without_split(self, runner, tmp_path, model_yaml, synth_file):
        ckpt = tmp_path / "ckpt"
        invoke(runner, "train", "--data", synth_file, "--config", model_yaml, "--out", ckpt,
               "--epochs", 1, "--batch-size", 4)
        (ckpt / "split.json").unlink()
        result = invoke(runner, "predict", "--ckpt", ckpt, "--data", synth_file,
                        "--out", tmp_path / "p.cptx", "--subset", "val")
        assert result.exit_code == 1


# ============================================================
# Evaluation commands
# ============================================================

class TestEvalCommand:

    def test_self_prediction_is_perfect(self, runner, tmp_path, patch_factory):
        patches = [patch_factory(size=6, seed=i, timestamp=60.0 * i) for i in range(3)]
        for p in patches:
            p.prediction = p.dense.copy()
        pred = write_patches(tmp_path / "self.cptx", patches)

        out = tmp_path / "eval"
        result = invoke(runner, "eval", "--pred", pred, "--dense", "--out", out, "--name", "oracle")
        assert result.exit_code == 0, result.output
        metrics = json.loads((out / METRICS_FILE).read_text())
        assert metrics["model"] == "oracle"
        assert all(v == 1.0 for v in metrics["mask"].values())
        assert all(v == 1.0 for v in metrics["phase"].values())
        assert metrics["warnings"] == []

    def test_degenerate_metrics_exit_2(self, runner, tmp_path, patch_factory):
        patch = patch_factory(size=4, seed=0)
        patch.dense[:] = 0
        patch.labels[:, patch.mask] = 0
        patch.prediction = np.zeros_like(patch.dense)
        pred = write_patches(tmp_path / "clear.cptx", [patch])
        result = invoke(runner, "eval", "--pred", pred, "--out", tmp_path / "eval")
        assert result.exit_code == 2

    def test_eval_without_predictions(self, runner, tmp_path, synth_file):
        result = invoke(runner, "eval", "--pred", synth_file, "--out", tmp_path / "eval")
        assert result.exit_code == 1

    def test_report_needs_metrics(self, runner, tmp_path):
        (tmp_path / "empty").mkdir()
        result = invoke(runner, "report", "--in", tmp_path / "empty", "--out", tmp_path / "report")
        assert result.exit_code == 1
