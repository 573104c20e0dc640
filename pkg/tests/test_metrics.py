import math

import numpy as np
import pytest

from hiseg.metrics import (
    aggregate_report,
    dice_metric,
    evaluate_sample,
    hausdorff,
)


def brute_dice(pred, gt, cls):
    """Independent oracle: literal set arithmetic over pixel coordinate tuples."""
    a = {tuple(p) for p in np.argwhere(pred == cls)}
    b = {tuple(p) for p in np.argwhere(gt == cls)}
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return 2.0 * len(a & b) / (len(a) + len(b))


def brute_hausdorff(a_pts, b_pts, variant):
    """Independent oracle: plain O(n^2) python loops."""
    def nearest(p, pts):
        return min(math.dist(p, q) for q in pts)

    d_ab = [nearest(p, b_pts) for p in a_pts]
    d_ba = [nearest(q, a_pts) for q in b_pts]
    if variant == "max":
        return max(max(d_ab), max(d_ba))
    return (sum(d_ab) / len(d_ab) + sum(d_ba) / len(d_ba)) / 2.0


class TestDiceMetric:
    def test_identical_masks(self):
        m = np.random.default_rng(0).integers(0, 3, (8, 8))
        for cls in range(3):
            assert dice_metric(m, m, cls) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4), dtype=int)
        b = np.zeros((4, 4), dtype=int)
        a[0, 0] = 1
        b[3, 3] = 1
        assert dice_metric(a, b, 1) == 0.0

    def test_half_overlap_closed_form(self):
        a = np.zeros((4, 4), dtype=int)
        b = np.zeros((4, 4), dtype=int)
        a[0, 0:4] = 1          # 4 pixels
        b[0, 2:4] = 1
        b[1, 0:2] = 1          # 4 pixels, overlap 2
        assert dice_metric(a, b, 1) == 0.5

    def test_empty_conventions(self):
        empty = np.zeros((3, 3), dtype=int)
        one = empty.copy()
        one[1, 1] = 1
        assert dice_metric(empty, empty, 1) == 1.0
        assert dice_metric(one, empty, 1) == 0.0
        assert dice_metric(empty, one, 1) == 0.0

    def test_symmetry_and_permutation_invariance(self):
        rng = np.random.default_rng(1)
        a = rng.integers(0, 3, (6, 6))
        b = rng.integers(0, 3, (6, 6))
        assert dice_metric(a, b, 1) == dice_metric(b, a, 1)
        perm = rng.permutation(36)
        ap = a.reshape(-1)[perm].reshape(6, 6)
        bp = b.reshape(-1)[perm].reshape(6, 6)
        assert dice_metric(a, b, 2) == dice_metric(ap, bp, 2)

    def test_matches_bruteforce_on_100_random_masks(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            a = rng.integers(0, 3, (7, 5))
            b = rng.integers(0, 3, (7, 5))
            cls = int(rng.integers(0, 3))
            assert dice_metric(a, b, cls) == brute_dice(a, b, cls)


class TestHausdorff:
    def test_equal_sets_zero(self):
        pts = np.array([[0, 0], [1, 2], [3, 3]])
        assert hausdorff(pts, pts, "max") == 0.0
        assert hausdorff(pts, pts, "avg") == 0.0

    def test_three_four_five_triangle(self):
        a = np.array([[0.0, 0.0]])
        b = np.array([[3.0, 4.0]])
        assert hausdorff(a, b, "max") == 5.0
        assert hausdorff(a, b, "avg") == 5.0

    def test_empty_set_undefined(self):
        assert hausdorff(np.empty((0, 2)), np.array([[1, 1]])) is None

    def test_max_at_least_avg(self):
        for seed in range(30):
            rng = np.random.default_rng(seed)
            a = rng.uniform(0, 20, (rng.integers(1, 12), 2))
            b = rng.uniform(0, 20, (rng.integers(1, 12), 2))
            assert hausdorff(a, b, "max") >= hausdorff(a, b, "avg") - 1e-12

    def test_matches_bruteforce_on_100_random_sets(self):
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            a = rng.uniform(0, 10, (int(rng.integers(1, 11)), 2))
            b = rng.uniform(0, 10, (int(rng.integers(1, 11)), 2))
            for variant in ("max", "avg"):
                mine = hausdorff(a, b, variant)
                ref = brute_hausdorff([tuple(p) for p in a], [tuple(q) for q in b], variant)
                assert mine == pytest.approx(ref, abs=1e-12)


class TestReports:
    def test_evaluate_sample_and_aggregate(self):
        gt = np.zeros((8, 8), dtype=int)
        gt[2:5, 2:5] = 1
        pred = gt.copy()
        pred[2, 2] = 0
        per = [evaluate_sample(pred, gt, num_classes=3)]
        report = aggregate_report(per)
        assert 0.9 < report.per_class_dice[0] < 1.0
        assert report.per_class_dice[1] == 1.0   # class 2 absent in both: convention
        assert report.per_class_hd[1] is None
        assert 2 in report.undefined_hd_classes
        assert report.mean_hd is not None
