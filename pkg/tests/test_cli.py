"""Exit-status and artifact tests for the qtn command line."""

import json
import os

import numpy as np
import pytest

from quicktumornet.cli import main
from quicktumornet.data import ManifestRow, read_qtns, save_manifest, write_qtns

SMALL_TRAIN = [
    "--base-channels", "8",
    "--input-size", "32x32",
    "--batch-size", "4",
]


def run(*argv):
    return main(list(argv))


def tree_bytes(root):
    """Every file under root as {relative path: bytes}."""
    out = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            full = os.path.join(dirpath, name)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synth dataset plus a 2-epoch trained run shared by the module."""
    base = tmp_path_factory.mktemp("cli")
    data = base / "data"
    assert run("synth", "--out", str(data), "--n", "10", "--seed", "0",
               "--size", "32x32") == 0
    run_dir = base / "run"
    assert run("train", "--manifest", str(data / "manifest.csv"),
               "--out", str(run_dir), "--epochs", "2", "--seed", "1",
               *SMALL_TRAIN) == 0
    return base


class TestSynth:
    def test_writes_pairs_and_manifest(self, tmp_path):
        out = tmp_path / "d"
        assert run("synth", "--out", str(out), "--n", "4", "--seed", "3") == 0
        names = sorted(os.listdir(out))
        assert "manifest.csv" in names
        assert sum(n.endswith("_mask.qtns") for n in names) == 4
        assert sum(n.endswith(".qtns") for n in names) == 8

    def test_identical_seeds_identical_trees(self, tmp_path):
        for tag in ("a", "b"):
            assert run("synth", "--out", str(tmp_path / tag), "--n", "6",
                       "--seed", "9", "--size", "32x32") == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_default_ratios_recorded(self, tmp_path, capsys):
        assert run("synth", "--out", str(tmp_path / "d"), "--n", "10",
                   "--seed", "0", "--size", "32x32") == 0
        assert "train 8, val 1, test 1" in capsys.readouterr().out

    def test_zero_count_is_usage_error(self, tmp_path):
        assert run("synth", "--out", str(tmp_path / "d"), "--n", "0") == 1

    def test_missing_out_flag_is_usage_error(self):
        assert run("synth", "--n", "4") == 1

    def test_omitted_seed_is_logged(self, tmp_path, capsys):
        assert run("synth", "--out", str(tmp_path / "d"), "--n", "4",
                   "--size", "32x32") == 0
        assert "seed:" in capsys.readouterr().out

    def test_bad_ratios_usage_error(self, tmp_path):
        assert run("synth", "--out", str(tmp_path / "d"), "--n", "4",
                   "--ratios", "0.5,0.5") == 1


class TestTrain:
    def test_curve_rows_match_epochs(self, workspace):
        lines = (workspace / "run" / "curve.csv").read_text().splitlines()
        assert len(lines) == 3
        assert (workspace / "run" / "last.qtnw").exists()

    def test_missing_manifest_is_data_error(self, tmp_path):
        assert run("train", "--manifest", str(tmp_path / "no.csv"),
                   "--out", str(tmp_path / "o"), "--seed", "0") == 2

    def test_config_file_supplies_values(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "train.cfg"
        cfg.write_text(
            "# toy settings\n"
            "max_epochs = 1\n"
            "batch_size = 4\n"
            "base_channels = 8\n"
            'input_size = "32x32"\n'
        )
        out = tmp_path / "run"
        assert run("train", "--manifest", str(workspace / "data" / "manifest.csv"),
                   "--out", str(out), "--seed", "1", "--config", str(cfg)) == 0
        assert len((out / "curve.csv").read_text().splitlines()) == 2

    def test_flag_overrides_config_file(self, workspace, tmp_path):
        cfg = tmp_path / "train.cfg"
        cfg.write_text("max_epochs = 5\nbatch_size = 4\nbase_channels = 8\n"
                       'input_size = "32x32"\n')
        out = tmp_path / "run"
        assert run("train", "--manifest", str(workspace / "data" / "manifest.csv"),
                   "--out", str(out), "--seed", "1", "--config", str(cfg),
                   "--epochs", "1") == 0
        assert len((out / "curve.csv").read_text().splitlines()) == 2

    def test_malformed_config_line_is_usage_error(self, workspace, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("just some words\n")
        assert run("train", "--manifest", str(workspace / "data" / "manifest.csv"),
                   "--out", str(tmp_path / "o"), "--seed", "1",
                   "--config", str(cfg)) == 1

    def test_divergent_input_is_runtime_error(self, tmp_path):
        image = np.full((32, 32), np.nan, dtype=np.float32)
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[2:6, 2:6] = 1
        write_qtns(tmp_path / "s.qtns", image, "image")
        write_qtns(tmp_path / "s_mask.qtns", mask, "mask")
        manifest = tmp_path / "manifest.csv"
        save_manifest(
            manifest,
            [ManifestRow("s.qtns", "s_mask.qtns", "p0", "axial", (1,), "train")],
        )
        assert run("train", "--manifest", str(manifest),
                   "--out", str(tmp_path / "o"), "--epochs", "1", "--seed", "0",
                   *SMALL_TRAIN) == 3


class TestEval:
    def test_report_files_written(self, workspace, tmp_path):
        out = tmp_path / "eval"
        assert run("eval", "--weights", str(workspace / "run" / "last.qtnw"),
                   "--manifest", str(workspace / "data" / "manifest.csv"),
                   "--split", "train", "--out", str(out), "--seed", "0") == 0
        report = json.loads((out / "report.json").read_text())
        for key in ("dice", "confusion", "roc", "accuracy", "ms_per_slice"):
            assert key in report
        for row in report["confusion"]["row_percent"]:
            assert sum(row) == pytest.approx(100.0) or sum(row) == 0.0

    def test_missing_weights_is_data_error(self, workspace, tmp_path):
        assert run("eval", "--weights", str(tmp_path / "no.qtnw"),
                   "--manifest", str(workspace / "data" / "manifest.csv"),
                   "--split", "train", "--out", str(tmp_path / "o")) == 2

    def test_empty_split_is_data_error(self, workspace, tmp_path):
        data = tmp_path / "flat"
        assert run("synth", "--out", str(data), "--n", "4", "--seed", "2",
                   "--size", "32x32", "--ratios", "1,0,0") == 0
        assert run("eval", "--weights", str(workspace / "run" / "last.qtnw"),
                   "--manifest", str(data / "manifest.csv"),
                   "--split", "val", "--out", str(tmp_path / "o"),
                   "--seed", "0") == 2

    def test_corrupt_checkpoint_is_data_error(self, workspace, tmp_path):
        blob = bytearray((workspace / "run" / "last.qtnw").read_bytes())
        blob[-1] ^= 0xFF
        bad = tmp_path / "bad.qtnw"
        bad.write_bytes(bytes(blob))
        assert run("eval", "--weights", str(bad),
                   "--manifest", str(workspace / "data" / "manifest.csv"),
                   "--split", "train", "--out", str(tmp_path / "o")) == 2


class TestPredict:
    def test_directory_input_yields_mask_per_slice(self, workspace, tmp_path, capsys):
        out = tmp_path / "pred"
        assert run("predict", "--weights", str(workspace / "run" / "last.qtnw"),
                   "--input", str(workspace / "data"), "--out", str(out)) == 0
        preds = [n for n in os.listdir(out) if n.endswith("_pred.qtns")]
        assert len(preds) == 10
        assert "ms per slice" in capsys.readouterr().out
        mask, kind = read_qtns(out / preds[0])
        assert kind == "mask"
        assert mask.shape == (32, 32)

    def test_single_file_with_overlay(self, workspace, tmp_path):
        out = tmp_path / "pred"
        src = workspace / "data" / "slice0000.qtns"
        assert run("predict", "--weights", str(workspace / "run" / "last.qtnw"),
                   "--input", str(src), "--out", str(out), "--overlay") == 0
        ppm = (out / "slice0000_overlay.ppm").read_bytes()
        assert ppm.startswith(b"P6\n32 32\n255\n")
        assert len(ppm) == len(b"P6\n32 32\n255\n") + 3 * 32 * 32

    def test_indivisible_size_needs_resize(self, workspace, tmp_path):
        odd = tmp_path / "odd.qtns"
        write_qtns(odd, np.random.default_rng(0).random((30, 30)).astype(np.float32),
                   "image")
        args = ("predict", "--weights", str(workspace / "run" / "last.qtnw"),
                "--input", str(odd), "--out", str(tmp_path / "p"))
        assert run(*args) == 2
        assert run(*args, "--resize") == 0
        mask, _ = read_qtns(tmp_path / "p" / "odd_pred.qtns")
        assert mask.shape == (30, 30)

    def test_mask_input_is_data_error(self, workspace, tmp_path):
        assert run("predict", "--weights", str(workspace / "run" / "last.qtnw"),
                   "--input", str(workspace / "data" / "slice0000_mask.qtns"),
                   "--out", str(tmp_path / "p")) == 2

    def test_missing_input_is_data_error(self, workspace, tmp_path):
        assert run("predict", "--weights", str(workspace / "run" / "last.qtnw"),
                   "--input", str(tmp_path / "ghost.qtns"),
                   "--out", str(tmp_path / "p")) == 2


class TestTopLevel:
    def test_help_exits_zero(self):
        assert run("--help") == 0

    def test_unknown_subcommand_is_usage_error(self):
        assert run("frobnicate") == 1

    def test_no_subcommand_is_usage_error(self):
        assert main([]) == 1
