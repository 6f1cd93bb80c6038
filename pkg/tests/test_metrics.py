import csv
import math

import numpy as np
import pytest

import lesionseg.metrics as M
import lesionseg.tensor as T
from lesionseg.tensor import ShapeError, Tensor


def naive_counts(pred, truth):
    tp = fp = fn = tn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p, t = bool(pred[i, j]), bool(truth[i, j])
            tp += p and t
            fp += p and not t
            fn += (not p) and t
            tn += (not p) and (not t)
    return tp, fp, fn, tn


class TestDiceLoss:
    def test_perfect_overlap_zero(self):
        mask = np.zeros((1, 1, 4, 4), np.float32)
        mask[0, 0, 1:3, 1:3] = 1.0
        loss = M.dice_loss(Tensor(mask), Tensor(mask.copy()))
        assert loss.item() == pytest.approx(0.0, abs=1e-7)

    def test_all_zero_prediction(self):
        target = np.zeros((1, 1, 4, 4), np.float32)
        target[0, 0, :2, :2] = 1.0  # s = 4 lesion pixels
        pred = np.zeros_like(target)
        loss = M.dice_loss(Tensor(pred), Tensor(target))
        assert loss.item() == pytest.approx(1.0 - 1.0 / 5.0, abs=1e-6)

    def test_matches_brute_force_formula(self):
        rng = np.random.default_rng(0)
        pred = rng.uniform(0.01, 0.99, size=(1, 1, 8, 8)).astype(np.float32)
        target = (rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(np.float32)
        loss = M.dice_loss(Tensor(pred), Tensor(target), smooth=1.0).item()
        inter = float((pred * target).sum())
        expected = 1.0 - (2.0 * inter + 1.0) / (pred.sum() + target.sum() + 1.0)
        assert loss == pytest.approx(expected, abs=1e-6)

    def test_monotone_along_interpolation_to_target(self):
        rng = np.random.default_rng(1)
        target = (rng.uniform(size=(1, 1, 8, 8)) > 0.7).astype(np.float32)
        losses = []
        for alpha in np.linspace(0.0, 0.98, 10):
            pred = (1 - alpha) * np.full_like(target, 0.5) + alpha * target
            pred = np.clip(pred, 1e-4, 1 - 1e-4)
            losses.append(M.dice_loss(Tensor(pred), Tensor(target)).item())
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            M.dice_loss(Tensor(np.zeros((1, 1, 2, 2), np.float32)),
                        Tensor(np.zeros((1, 1, 3, 3), np.float32)))

    def test_differentiable(self):
        rng = np.random.default_rng(2)
        pred = Tensor(rng.uniform(0.2, 0.8, (1, 1, 4, 4)), requires_grad=True)
        target = Tensor((rng.uniform(size=(1, 1, 4, 4)) > 0.5).astype(np.float64))
        with T.Tape() as tape:
            T.backward(M.dice_loss(pred, target), tape)
        assert pred.grad is not None and np.abs(pred.grad).sum() > 0


class TestConfusion:
    def test_identical_masks(self):
        m = (np.random.default_rng(0).uniform(size=(8, 8)) > 0.5).astype(np.uint8)
        c = M.confusion(m, m)
        assert c.fp == 0 and c.fn == 0

    def test_complement(self):
        m = (np.random.default_rng(1).uniform(size=(8, 8)) > 0.5).astype(np.uint8)
        c = M.confusion(1 - m, m)
        assert c.tp == 0 and c.tn == 0

    def test_matches_double_loop(self):
        rng = np.random.default_rng(2)
        pred = (rng.uniform(size=(16, 16)) > 0.5).astype(np.uint8)
        truth = (rng.uniform(size=(16, 16)) > 0.5).astype(np.uint8)
        c = M.confusion(pred, truth)
        assert (c.tp, c.fp, c.fn, c.tn) == naive_counts(pred, truth)

    def test_counts_sum_to_pixels(self):
        rng = np.random.default_rng(3)
        pred = (rng.uniform(size=(5, 7)) > 0.3).astype(np.uint8)
        truth = (rng.uniform(size=(5, 7)) > 0.7).astype(np.uint8)
        c = M.confusion(pred, truth)
        assert c.tp + c.fp + c.fn + c.tn == 35

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            M.confusion(np.zeros((2, 2)), np.zeros((3, 3)))


class TestScalarMetrics:
    def test_dsc_identical(self):
        assert M.dsc(M.ConfusionCounts(tp=5, fp=0, fn=0, tn=5)) == 1.0

    def test_dsc_hand_count(self):
        # |pred|=2, |truth|=4, overlap 2
        assert M.dsc(M.ConfusionCounts(tp=2, fp=0, fn=2, tn=10)) == pytest.approx(2 / 3)

    def test_dsc_disjoint(self):
        assert M.dsc(M.ConfusionCounts(tp=0, fp=3, fn=4, tn=1)) == 0.0

    def test_dsc_both_empty(self):
        assert M.dsc(M.ConfusionCounts(tp=0, fp=0, fn=0, tn=9)) == 1.0

    def test_precision_recall_perfect(self):
        c = M.ConfusionCounts(tp=4, fp=0, fn=0, tn=4)
        assert M.precision(c) == 1.0 and M.recall(c) == 1.0

    def test_superset_prediction(self):
        c = M.ConfusionCounts(tp=2, fp=2, fn=0, tn=4)
        assert M.recall(c) == 1.0
        assert M.precision(c) == 0.5

    def test_empty_conventions(self):
        both_empty = M.ConfusionCounts(tp=0, fp=0, fn=0, tn=4)
        assert M.precision(both_empty) == 1.0 and M.recall(both_empty) == 1.0
        empty_pred = M.ConfusionCounts(tp=0, fp=0, fn=3, tn=1)
        assert M.precision(empty_pred) == 0.0
        empty_truth = M.ConfusionCounts(tp=0, fp=3, fn=0, tn=1)
        assert M.recall(empty_truth) == 0.0

    def test_voe(self):
        assert M.voe(M.ConfusionCounts(tp=4, fp=0, fn=0, tn=1)) == 0.0
        assert M.voe(M.ConfusionCounts(tp=2, fp=1, fn=1, tn=0)) == 50.0
        assert M.voe(M.ConfusionCounts(tp=0, fp=2, fn=2, tn=0)) == 100.0
        assert M.voe(M.ConfusionCounts(tp=0, fp=0, fn=0, tn=4)) == 0.0

    def test_rvd(self):
        ones = np.ones((2, 3), np.uint8)
        assert M.rvd(ones, ones) == 0.0
        pred = np.zeros((4, 4), np.uint8); pred[0, :2] = 1
        truth = np.zeros((4, 4), np.uint8); truth[0] = 1
        assert M.rvd(truth, pred) == pytest.approx(100.0)  # 4 vs 2
        assert M.rvd(pred, truth) == pytest.approx(-50.0)  # 2 vs 4
        assert M.rvd(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0
        assert math.isinf(M.rvd(ones, np.zeros((2, 3))))

    def test_jaccard_dice_identity(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            pred = (rng.uniform(size=(16, 16)) > 0.5).astype(np.uint8)
            truth = (rng.uniform(size=(16, 16)) > 0.5).astype(np.uint8)
            c = M.confusion(pred, truth)
            d = M.dsc(c)
            assert M.voe(c) == pytest.approx(100.0 * (1 - d / (2 - d)), abs=1e-9)


class TestBinarize:
    def test_strict_threshold(self):
        assert M.binarize(np.array([[0.5]]), 0.5)[0, 0] == 0

    def test_all_above(self):
        assert M.binarize(np.full((3, 3), 0.9), 0.5).all()

    def test_matches_comparison(self):
        rng = np.random.default_rng(5)
        prob = rng.uniform(size=(6, 6))
        np.testing.assert_array_equal(
            M.binarize(prob, 0.3), (prob > 0.3).astype(np.uint8))


class TestAggregateReport:
    def rows(self, values):
        return [M.SampleMetrics("s", i, v, v, v, v * 100, v * 10)
                for i, v in enumerate(values)]

    def test_single_row(self):
        report = M.aggregate_report(self.rows([0.7]))
        assert report.mean_dsc == pytest.approx(0.7)

    def test_two_row_mean(self):
        report = M.aggregate_report(self.rows([0.4, 0.6]))
        assert report.mean_dsc == pytest.approx(0.5)

    def test_random_rows_match_direct_mean(self):
        rng = np.random.default_rng(6)
        values = rng.uniform(size=10).tolist()
        report = M.aggregate_report(self.rows(values))
        assert report.mean_dsc == pytest.approx(float(np.mean(values)), abs=1e-12)
        assert report.mean_rvd_signed == pytest.approx(
            float(np.mean([v * 10 for v in values])), abs=1e-9)
        assert report.mean_rvd_abs == pytest.approx(
            float(np.mean([abs(v * 10) for v in values])), abs=1e-9)

    def test_infinite_rvd_excluded_from_means(self):
        rows = self.rows([0.5, 0.5])
        rows[0].rvd = math.inf
        report = M.aggregate_report(rows)
        assert math.isfinite(report.mean_rvd_signed)

    def test_csv_layout(self, tmp_path):
        report = M.aggregate_report(self.rows([0.25, 0.75]))
        path = tmp_path / "report.csv"
        M.write_report_csv(report, path)
        with open(path) as fh:
            lines = list(csv.reader(fh))
        assert lines[0] == ["subject", "slice", "dsc", "precision", "recall",
                            "voe", "rvd"]
        assert len(lines) == 4
        assert lines[-1][0] == "AGGREGATE"
        assert float(lines[-1][2]) == pytest.approx(0.5)

    def test_dsc_column_file(self, tmp_path):
        report = M.aggregate_report(self.rows([0.25, 0.75]))
        path = tmp_path / "dsc.txt"
        M.write_dsc_column(report, path)
        values = [float(v) for v in path.read_text().split()]
        assert values == [0.25, 0.75]


def test_thousand_random_pairs_match_oracle():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        pred = (rng.uniform(size=(16, 16)) > rng.uniform(0.2, 0.8)).astype(np.uint8)
        truth = (rng.uniform(size=(16, 16)) > rng.uniform(0.2, 0.8)).astype(np.uint8)
        tp, fp, fn, tn = naive_counts(pred, truth)
        c = M.confusion(pred, truth)
        assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
        denom = 2 * tp + fp + fn
        expected_dsc = 1.0 if denom == 0 else 2 * tp / denom
        assert M.dsc(c) == pytest.approx(expected_dsc, abs=1e-9)
