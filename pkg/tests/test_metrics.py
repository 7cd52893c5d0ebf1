"""Metric tests against set-counting and pair-counting oracles."""

import json
import math

import numpy as np
import pytest

from quicktumornet.data import SynthConfig, load_manifest, synth_generate
from quicktumornet.metrics import (
    EvalReport,
    confusion_matrix,
    dataset_fingerprint,
    dice_per_class,
    evaluate,
    mean_foreground_dice,
    pixel_accuracy,
    roc_curve,
    row_normalized,
    write_report,
)


def auc_by_pair_counting(scores, truth):
    """Mann-Whitney statistic: fraction of (pos, neg) pairs ranked correctly."""
    pos = [s for s, t in zip(scores, truth) if t]
    neg = [s for s, t in zip(scores, truth) if not t]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestDice:
    def test_identical_masks(self):
        mask = np.array([[1, 1], [0, 2]])
        assert dice_per_class(mask, mask, 1) == 1.0

    def test_disjoint_masks(self):
        pred = np.array([[1, 1], [0, 0]])
        true = np.array([[0, 0], [1, 1]])
        assert dice_per_class(pred, true, 1) == 0.0

    def test_half_overlap(self):
        pred = np.zeros((4, 4), dtype=int)
        true = np.zeros((4, 4), dtype=int)
        pred[0, :4] = 2  # |A| = 4
        true[:, 0] = 2  # |B| = 4... overlap would be 1; build overlap 2 instead
        pred[:] = 0
        true[:] = 0
        pred[0, 0:4] = 2
        true[0, 2:4] = 2
        true[1, 0:2] = 2
        assert dice_per_class(pred, true, 2) == 0.5

    def test_absent_class_returns_none(self):
        assert dice_per_class(np.ones((2, 2), dtype=int), np.zeros((2, 2), dtype=int), 1) is None

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        a = rng.integers(0, 4, (8, 8))
        b = rng.integers(0, 4, (8, 8))
        for c in range(4):
            da = dice_per_class(a, b, c)
            db = dice_per_class(b, a, c)
            if da is not None and db is not None:
                assert da == pytest.approx(db, abs=0)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError, match="dims"):
            dice_per_class(np.zeros((2, 2), dtype=int), np.zeros((3, 3), dtype=int), 0)

    def test_set_counting_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pred = rng.integers(0, 4, (6, 6))
            true = rng.integers(0, 4, (6, 6))
            for c in range(4):
                b = {(i, j) for i in range(6) for j in range(6) if true[i, j] == c}
                if not b:
                    continue
                a = {(i, j) for i in range(6) for j in range(6) if pred[i, j] == c}
                expected = 2 * len(a & b) / (len(a) + len(b))
                assert abs(dice_per_class(pred, true, c) - expected) < 1e-9

    def test_two_pass_statistics_oracle(self):
        rng = np.random.default_rng(2)
        values = list(rng.random(31))
        mean = sum(values) / len(values)
        std = math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))
        assert abs(np.mean(values) - mean) < 1e-12
        assert abs(np.std(values) - std) < 1e-12


class TestConfusion:
    def test_perfect_prediction_diagonal(self):
        mask = np.random.default_rng(3).integers(0, 4, (10, 10))
        counts = confusion_matrix(mask, mask)
        assert np.trace(counts) == 100
        percent = row_normalized(counts)
        for c in range(4):
            if counts[c].sum():
                assert percent[c, c] == 100.0

    def test_everything_predicted_background(self):
        true = np.array([[0, 1], [2, 3]])
        counts = confusion_matrix(np.zeros((2, 2), dtype=int), true)
        percent = row_normalized(counts)
        np.testing.assert_allclose(percent[:, 0], 100.0)

    def test_three_pixel_example(self):
        counts = confusion_matrix(np.array([[0, 1, 2]]), np.array([[0, 1, 1]]))
        assert counts[0, 0] == 1 and counts[1, 1] == 1 and counts[1, 2] == 1
        percent = row_normalized(counts)
        np.testing.assert_allclose(percent[1], [0.0, 50.0, 50.0, 0.0])

    def test_total_and_accuracy_identity(self):
        rng = np.random.default_rng(4)
        pred = rng.integers(0, 4, (13, 7))
        true = rng.integers(0, 4, (13, 7))
        counts = confusion_matrix(pred, true)
        assert counts.sum() == pred.size
        assert pixel_accuracy(counts) == np.trace(counts) / pred.size

    def test_nonempty_rows_sum_to_100(self):
        rng = np.random.default_rng(5)
        counts = confusion_matrix(rng.integers(0, 4, (20, 20)), rng.integers(0, 3, (20, 20)))
        percent = row_normalized(counts)
        for c in range(4):
            if counts[c].sum():
                assert abs(percent[c].sum() - 100.0) < 1e-9
            else:
                assert percent[c].sum() == 0.0


class TestRoc:
    def test_perfect_separation(self):
        curve = roc_curve(np.array([0.9, 0.8, 0.2, 0.1]), np.array([1, 1, 0, 0], bool), 1)
        assert curve.auc == 1.0

    def test_constant_scores(self):
        curve = roc_curve(np.full(10, 0.5), np.arange(10) < 4, 1)
        assert curve.auc == 0.5

    def test_pair_counting_example(self):
        scores = np.array([0.9, 0.4, 0.5, 0.2])
        truth = np.array([1, 1, 0, 0], bool)
        curve = roc_curve(scores, truth, 1)
        assert abs(curve.auc - 0.75) < 1e-12

    def test_matches_pair_counting_with_ties(self):
        rng = np.random.default_rng(6)
        for _ in range(40):
            n = int(rng.integers(5, 200))
            scores = np.round(rng.random(n), 1)  # coarse grid forces ties
            truth = rng.random(n) < 0.4
            if truth.all() or not truth.any():
                continue
            curve = roc_curve(scores, truth, 0)
            assert abs(curve.auc - auc_by_pair_counting(scores, truth)) < 1e-9

    def test_curve_is_monotone_from_origin_to_corner(self):
        rng = np.random.default_rng(7)
        scores = rng.random(100)
        truth = rng.random(100) < 0.5
        curve = roc_curve(scores, truth, 0)
        assert curve.fpr[0] == 0.0 and curve.tpr[0] == 0.0
        assert curve.fpr[-1] == 1.0 and curve.tpr[-1] == 1.0
        assert (np.diff(curve.fpr) >= 0).all()
        assert (np.diff(curve.tpr) >= 0).all()

    def test_single_class_error_names_class(self):
        with pytest.raises(ValueError, match="class 3"):
            roc_curve(np.array([0.1, 0.2]), np.array([True, True]), 3)

    def test_subsampling_is_seeded(self):
        rng = np.random.default_rng(8)
        scores = rng.random(5000)
        truth = rng.random(5000) < 0.5
        a = roc_curve(scores, truth, 0, max_samples=1000, seed=9)
        b = roc_curve(scores, truth, 0, max_samples=1000, seed=9)
        assert a.auc == b.auc


class _OracleModel:
    """Stub that answers with a one-hot encoding of each slice's own mask."""

    def __init__(self, config, masks):
        self.config = config
        self.params = {"stub": np.zeros(1, dtype=np.float64)}
        self._masks = list(masks)
        self._i = 0

    def forward(self, x, train):
        assert not train
        mask = self._masks[self._i]
        self._i += 1
        probs = np.zeros((1, 4) + mask.shape)
        for c in range(4):
            probs[0, c][mask == c] = 1.0
        return probs


class TestEvaluate:
    @pytest.fixture()
    def dataset(self, tmp_path):
        synth_generate(SynthConfig(count=4, seed=5, size=(32, 32)), tmp_path)
        return tmp_path, load_manifest(tmp_path / "manifest.csv")

    def test_self_evaluation_is_perfect(self, dataset):
        tmp_path, rows = dataset
        from quicktumornet.data import load_sample
        from quicktumornet.model import ModelConfig

        masks = [load_sample(r, str(tmp_path)).mask for r in rows]
        model = _OracleModel(ModelConfig(input_size=(32, 32)), masks)
        ticks = iter(np.arange(0.0, 100.0, 0.5))
        report = evaluate(model, rows, str(tmp_path), clock=lambda: next(ticks))
        assert report.accuracy == 1.0
        for values in report.dice_values.values():
            assert all(v == 1.0 for v in values)
        assert mean_foreground_dice(report.dice_values) == 1.0
        assert np.trace(report.confusion) == report.confusion.sum()
        assert report.ms_per_slice > 0

    def test_report_json_schema(self, dataset, tmp_path):
        base, rows = dataset
        from quicktumornet.data import load_sample
        from quicktumornet.model import ModelConfig

        masks = [load_sample(r, str(base)).mask for r in rows]
        model = _OracleModel(ModelConfig(input_size=(32, 32)), masks)
        report = evaluate(model, rows, str(base))
        out = tmp_path / "out"
        write_report(report, out)
        payload = json.loads((out / "report.json").read_text())
        assert set(payload) == {"dice", "confusion", "roc", "accuracy", "ms_per_slice",
                                "fingerprint"}
        for row_pct, row_counts in zip(
            payload["confusion"]["row_percent"], payload["confusion"]["counts"]
        ):
            if sum(row_counts):
                assert abs(sum(row_pct) - 100.0) < 1e-9
        for c in payload["roc"]:
            assert 0.0 <= payload["roc"][c]["auc"] <= 1.0
        assert (out / "confusion.csv").exists()

    def test_roc_csv_files(self, dataset, tmp_path):
        base, rows = dataset
        from quicktumornet.data import load_sample
        from quicktumornet.model import ModelConfig

        masks = [load_sample(r, str(base)).mask for r in rows]
        report = evaluate(_OracleModel(ModelConfig(input_size=(32, 32)), masks), rows, str(base))
        out = tmp_path / "rep"
        write_report(report, out)
        for c in report.roc:
            lines = (out / f"roc_class{c}.csv").read_text().splitlines()
            assert lines[0] == "fpr,tpr"
            assert len(lines) == len(report.roc[c].fpr) + 1

    def test_empty_split_rejected(self):
        from quicktumornet.model import ModelConfig

        with pytest.raises(ValueError, match="empty"):
            evaluate(_OracleModel(ModelConfig(), []), [], ".")

    def test_fingerprint_tracks_contents(self, dataset):
        base, rows = dataset
        a = dataset_fingerprint(rows, str(base))
        assert a == dataset_fingerprint(rows, str(base))
        b = dataset_fingerprint(rows[:-1], str(base))
        assert a != b
