import math

import numpy as np
import numpy.testing as npt
import pytest

from rscnet.errors import DomainError, RangeError
from rscnet.metrics import (
    ConfusionMatrix,
    accuracy,
    accuracy_from_class_rates,
    box_stats,
    confusion,
    merge_classes,
    per_class_rates,
    write_metrics_csv,
)
from rscnet.tensor import SeededRng


class TestConfusion:
    def test_perfect_predictions_diagonal(self):
        cm = confusion([0, 1, 2, 1], [0, 1, 2, 1], 3)
        npt.assert_array_equal(cm.counts, np.diag([1, 2, 1]))

    def test_all_predicted_class_zero(self):
        cm = confusion([0, 0, 0], [0, 1, 2], 3)
        assert cm.counts[:, 0].sum() == 3
        assert cm.counts[:, 1:].sum() == 0

    def test_hand_count(self):
        cm = confusion([0, 1, 1], [0, 0, 1], 2)
        npt.assert_array_equal(cm.counts, [[1, 1], [0, 1]])

    def test_label_out_of_range(self):
        with pytest.raises(RangeError):
            confusion([0, 3], [0, 1], 3)

    def test_length_mismatch(self):
        with pytest.raises(DomainError):
            confusion([0], [0, 1], 2)


class TestAccuracy:
    def test_hand_case(self):
        cm = ConfusionMatrix(np.array([[90, 10], [5, 95]]), ("a", "b"))
        assert accuracy(cm) == pytest.approx(0.925)

    def test_diagonal_is_one(self):
        assert accuracy(ConfusionMatrix(np.diag([3, 4, 5]), ("a", "b", "c"))) == 1.0

    def test_zero_diagonal(self):
        assert accuracy(ConfusionMatrix(np.array([[0, 2], [3, 0]]), ("a", "b"))) == 0.0

    def test_empty(self):
        with pytest.raises(DomainError):
            accuracy(ConfusionMatrix(np.zeros((2, 2), dtype=int), ("a", "b")))


class TestPerClassRates:
    def test_diagonal(self):
        rates = per_class_rates(ConfusionMatrix(np.diag([5, 5]), ("a", "b")))
        assert [r.recall for r in rates] == [1.0, 1.0]
        assert [r.within_class_fp for r in rates] == [0.0, 0.0]
        assert [r.conventional_fpr for r in rates] == [0.0, 0.0]

    def test_hand_case(self):
        rates = per_class_rates(ConfusionMatrix(np.array([[8, 2], [1, 9]]), ("a", "b")))
        assert rates[0].recall == pytest.approx(0.8)
        assert rates[1].recall == pytest.approx(0.9)
        assert rates[0].within_class_fp == pytest.approx(0.2)
        assert rates[1].within_class_fp == pytest.approx(0.1)
        # false alarms: 1 of 10 true-b predicted a; 2 of 10 true-a predicted b
        assert rates[0].conventional_fpr == pytest.approx(0.1)
        assert rates[1].conventional_fpr == pytest.approx(0.2)

    def test_recall_plus_fp_is_one(self):
        rng = SeededRng(1)
        counts = np.floor(rng.uniform(1, 20, (4, 4))).astype(int)
        rates = per_class_rates(ConfusionMatrix(counts, tuple("abcd")))
        for r in rates:
            assert r.recall + r.within_class_fp == 1.0

    def test_empty_row(self):
        with pytest.raises(DomainError):
            per_class_rates(ConfusionMatrix(np.array([[3, 0], [0, 0]]), ("a", "b")))

    def test_single_class_fpr_undefined(self):
        rates = per_class_rates(ConfusionMatrix(np.array([[7]]), ("a",)))
        assert math.isnan(rates[0].conventional_fpr)


class TestOverallAccuracyIdentity:
    def test_published_two_class_numbers(self):
        # shares and within-class FP rates reported for the field dataset
        acc = accuracy_from_class_rates([0.5539, 0.4461], [0.0487, 0.1475])
        assert abs(acc - 0.9072) < 0.0005

    def test_identity_on_random_matrices(self):
        rng = SeededRng(2)
        for _ in range(20):
            counts = np.floor(rng.uniform(1, 30, (3, 3))).astype(int)
            cm = ConfusionMatrix(counts, ("a", "b", "c"))
            rates = per_class_rates(cm)
            shares = counts.sum(axis=1) / counts.sum()
            acc = accuracy_from_class_rates(shares, [r.within_class_fp for r in rates])
            assert acc == pytest.approx(accuracy(cm), abs=1e-12)


class TestMergeClasses:
    def test_merge_all_into_one(self):
        cm = ConfusionMatrix(np.array([[5, 3], [2, 6]]), ("a", "b"))
        merged = merge_classes(cm, [[0, 1]])
        npt.assert_array_equal(merged.counts, [[16]])
        assert accuracy(merged) == 1.0

    def test_identity_grouping(self):
        cm = ConfusionMatrix(np.array([[5, 3], [2, 6]]), ("a", "b"))
        merged = merge_classes(cm, [[0], [1]])
        npt.assert_array_equal(merged.counts, cm.counts)

    def test_total_preserved(self):
        rng = SeededRng(3)
        counts = np.floor(rng.uniform(0, 9, (5, 5))).astype(int)
        cm = ConfusionMatrix(counts, tuple("abcde"))
        merged = merge_classes(cm, [[0, 1], [2], [3, 4]])
        assert merged.total == cm.total

    def test_confusable_pair_merge_raises_accuracy(self):
        # all confusion lives between the first two classes, as with bare
        # vs barely-covered roads; merging them absorbs every error
        counts = np.array(
            [
                [50, 30, 0, 0, 0],
                [25, 40, 0, 0, 0],
                [0, 0, 60, 0, 0],
                [0, 0, 0, 60, 0],
                [0, 0, 0, 0, 60],
            ]
        )
        cm = ConfusionMatrix(counts, ("bare", "lt25", "c", "d", "e"))
        merged = merge_classes(cm, [[0, 1], [2], [3], [4]])
        assert accuracy(merged) > accuracy(cm)
        assert accuracy(merged) == 1.0

    def test_non_partition(self):
        cm = ConfusionMatrix(np.eye(3, dtype=int), ("a", "b", "c"))
        with pytest.raises(DomainError):
            merge_classes(cm, [[0, 1]])
        with pytest.raises(DomainError):
            merge_classes(cm, [[0, 1], [1, 2]])


class TestBoxStats:
    def test_exact_ranks(self):
        assert box_stats([1, 2, 3, 4, 5]) == (3.0, 2.0, 4.0)

    def test_single_value(self):
        assert box_stats([7.5]) == (7.5, 7.5, 7.5)

    def test_interpolated(self):
        median, q25, q75 = box_stats([1, 2, 3, 4])
        assert (median, q25, q75) == (2.5, 1.75, 3.25)

    def test_permutation_invariant(self):
        values = SeededRng(4).uniform(0, 1, 11).tolist()
        shuffled = list(reversed(sorted(values)))
        assert box_stats(values) == box_stats(shuffled)

    def test_empty(self):
        with pytest.raises(DomainError):
            box_stats([])


class TestMetricsCsv:
    def test_layout(self, tmp_path):
        cm = ConfusionMatrix(np.array([[8, 2], [1, 9]]), ("bare", "snow"))
        path = tmp_path / "metrics.csv"
        write_metrics_csv(cm, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "class,true_count,recall,within_class_fp,conventional_fpr"
        assert lines[1] == "bare,10,0.800000,0.200000,0.100000"
        assert lines[-1] == "overall,20,0.850000,,"

    def test_absent_class_blank_rates(self, tmp_path):
        cm = ConfusionMatrix(np.array([[4, 0], [0, 0]]), ("a", "b"))
        path = tmp_path / "metrics.csv"
        write_metrics_csv(cm, path)
        lines = path.read_text().strip().splitlines()
        assert lines[2] == "b,0,,,"
