import math

import numpy as np
import pytest

from hiseg.errors import DomainError, ShapeError
from hiseg.losses import (
    LossConfig,
    ce_loss,
    dice_loss,
    lambda_w,
    nearest_label_resize,
    one_hot,
    total_loss,
)
from hiseg.tensor import Tensor, grad_check, softmax


class TestDiceLoss:
    def test_perfect_prediction_near_zero(self):
        gt = np.random.default_rng(0).integers(0, 3, (1, 4, 4))
        probs = Tensor(one_hot(gt, 3))
        assert dice_loss(probs, gt).item() < 1e-4

    def test_all_wrong_near_one(self):
        # every class present in gt, prediction cyclically shifted: zero overlap
        gt = np.repeat(np.arange(3), 4).reshape(1, 3, 4)
        wrong = one_hot((gt + 1) % 3, 3)
        assert dice_loss(Tensor(wrong), gt).item() > 0.99

    def test_label_out_of_range(self):
        with pytest.raises(DomainError):
            dice_loss(Tensor(np.ones((1, 3, 2, 2)) / 3), np.full((1, 2, 2), 5))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        gt = rng.integers(0, 3, (1, 4, 4))

        def f(logits):
            return dice_loss(softmax(logits, axis=1), gt)

        report = grad_check(f, Tensor(rng.standard_normal((1, 3, 4, 4))), tol=1e-4)
        assert report.passed, report

    def test_strictly_decreases_when_mass_moves_to_truth(self):
        # single-pixel enumeration: raising the true-class probability lowers the loss
        gt = np.zeros((1, 1, 1), dtype=int)
        for p_true in (0.2, 0.4, 0.6, 0.8):
            a = np.array([[[[p_true]], [[1 - p_true]], [[0.0]]]])
            b = np.array([[[[p_true + 0.1]], [[0.9 - p_true]], [[0.0]]]])
            assert dice_loss(Tensor(b), gt).item() < dice_loss(Tensor(a), gt).item()


class TestCeLoss:
    def test_uniform_logits_give_log_c(self):
        for c in (2, 3, 9):
            logits = Tensor(np.zeros((1, c, 3, 3)))
            gt = np.random.default_rng(c).integers(0, c, (1, 3, 3))
            assert ce_loss(logits, gt).item() == pytest.approx(math.log(c), rel=1e-12)

    def test_confident_correct_logits_vanish(self):
        gt = np.ones((1, 2, 2), dtype=int)
        logits = np.zeros((1, 3, 2, 2))
        logits[:, 1] = 50.0
        assert ce_loss(Tensor(logits), gt).item() < 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(2)
        gt = rng.integers(0, 4, (2, 3, 3))
        report = grad_check(lambda t: ce_loss(t, gt), Tensor(rng.standard_normal((2, 4, 3, 3))),
                            tol=1e-4)
        assert report.passed, report


class TestLambdaSchedule:
    def test_epoch_zero_is_start(self):
        assert lambda_w(0, LossConfig()) == 0.8

    def test_epoch_300_closed_form(self):
        val = lambda_w(300, LossConfig())
        assert val == pytest.approx(0.8 * math.exp(-1.5), abs=1e-12)

    def test_strictly_decreasing(self):
        cfg = LossConfig()
        vals = [lambda_w(e, cfg) for e in range(400)]
        assert all(b < a for a, b in zip(vals, vals[1:]))
        assert all(0 < v <= cfg.lambda_w_start for v in vals)

    def test_alternate_published_schedule_expressible(self):
        cfg = LossConfig(lambda_w_start=0.4, lambda_w_decay=0.02)
        assert lambda_w(0, cfg) == 0.4
        assert lambda_w(300, cfg) < 0.001

    def test_invalid_start_rejected(self):
        with pytest.raises(DomainError):
            LossConfig(lambda_w_start=1.5)


class TestTotalLoss:
    def _logits_for(self, gt, strength=60.0):
        n, h, w = gt.shape
        c = int(gt.max()) + 1
        return Tensor(one_hot(gt, c) * strength)

    def test_perfect_both_stages_near_zero(self):
        gt = np.random.default_rng(3).integers(0, 3, (1, 8, 8))
        gt1 = nearest_label_resize(gt, 2, 2)
        l, parts = total_loss(self._logits_for(gt1), self._logits_for(gt), gt, 0, LossConfig())
        assert l.item() < 1e-3

    def test_lambda_one_boundary_is_stage1_only(self):
        cfg = LossConfig(lambda_w_start=1.0, lambda_w_decay=0.0)
        rng = np.random.default_rng(4)
        gt = rng.integers(0, 3, (1, 8, 8))
        l1 = Tensor(rng.standard_normal((1, 3, 2, 2)))
        l2 = Tensor(rng.standard_normal((1, 3, 8, 8)))
        total, parts = total_loss(l1, l2, gt, 0, cfg)
        assert total.item() == pytest.approx(parts["stage1"], rel=1e-12)

    def test_default_weights_from_config(self):
        cfg = LossConfig()
        assert cfg.lambda_dice == 0.9 and cfg.lambda_ce == 0.1

    def test_convex_combination_at_every_epoch(self):
        cfg = LossConfig()
        for epoch in (0, 10, 100, 299):
            lam = lambda_w(epoch, cfg)
            assert lam + (1 - lam) == pytest.approx(1.0, abs=1e-15)

    def test_coefficients_recoverable_from_parts(self):
        rng = np.random.default_rng(5)
        gt = rng.integers(0, 3, (1, 8, 8))
        l1 = Tensor(rng.standard_normal((1, 3, 2, 2)))
        l2 = Tensor(rng.standard_normal((1, 3, 8, 8)))
        cfg = LossConfig()
        total, parts = total_loss(l1, l2, gt, 17, cfg)
        lam = parts["lambda_w"]
        assert total.item() == pytest.approx(lam * parts["stage1"] + (1 - lam) * parts["stage2"],
                                             rel=1e-12)

    def test_resolution_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            total_loss(Tensor(np.zeros((1, 3, 2, 2))), None, np.zeros((2, 8), dtype=int), 0,
                       LossConfig())


class TestNearestResize:
    def test_labels_stay_integral_and_present(self):
        rng = np.random.default_rng(6)
        gt = rng.integers(0, 4, (2, 16, 16))
        small = nearest_label_resize(gt, 4, 4)
        assert small.shape == (2, 4, 4)
        assert set(np.unique(small)) <= set(np.unique(gt))
