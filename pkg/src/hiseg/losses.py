"""Training objectives: soft Dice, multi-class cross-entropy, the decaying
stage-weight schedule, and the deep-supervision total loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import Tensor, log_softmax, softmax


@dataclass
class LossConfig:
    lambda_ce: float = 0.1
    lambda_dice: float = 0.9
    lambda_w_start: float = 0.8
    lambda_w_decay: float = 0.005
    smoothing_eps: float = 1e-5
    # the alternate published schedule (0.4 start, reaching ~0 by epoch 300)
    # is selected by overriding lambda_w_start/lambda_w_decay in config
    per_iteration_decay: bool = False

    def __post_init__(self):
        if not 0.0 < self.lambda_w_start <= 1.0:
            raise DomainError("lambda_w_start must lie in (0, 1]")


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DomainError(f"labels must lie in [0, {num_classes})")
    out = np.zeros(labels.shape + (num_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return np.moveaxis(out, -1, 1)  # (N, C, ...)


def dice_loss(probs: Tensor, gt: np.ndarray, eps: float = 1e-5) -> Tensor:
    """1 - mean of the smoothed soft Dice overlap.

    Sums run over each sample's pixels separately, then the overlap is
    averaged over (sample, class); per-sample aggregation keeps the loss
    sensitive to false positives on samples where a class is absent.
    """
    if probs.ndim != 4:
        raise ShapeError(f"expected (N,C,h,w) probabilities, got {probs.shape}")
    n, c, h, w = probs.shape
    g = one_hot(gt, c)
    if g.shape != probs.shape:
        raise ShapeError(f"gt shape {np.asarray(gt).shape} does not match probs {probs.shape}")
    p_sum = probs.sum(axis=-1).sum(axis=-1)                 # (N, C)
    inter = (probs * Tensor(g)).sum(axis=-1).sum(axis=-1)   # (N, C)
    g_sum = Tensor(g.sum(axis=(2, 3)))
    dice = (inter.scale(2.0) + Tensor(eps)) / (p_sum + g_sum + Tensor(eps))
    return Tensor(1.0) - dice.mean()


def ce_loss(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy from a stable log-softmax."""
    if logits.ndim != 4:
        raise ShapeError(f"expected (N,C,h,w) logits, got {logits.shape}")
    n, c, h, w = logits.shape
    g = one_hot(gt, c)
    logp = log_softmax(logits, axis=1)
    return -(logp * Tensor(g)).sum(axis=1).mean()


def lambda_w(epoch: int, cfg: LossConfig) -> float:
    """Stage-weighting coefficient: start * exp(-decay * epoch)."""
    return cfg.lambda_w_start * math.exp(-cfg.lambda_w_decay * epoch)


def stage_loss(logits: Tensor, gt: np.ndarray, cfg: LossConfig) -> Tensor:
    ce = ce_loss(logits, gt)
    dice = dice_loss(softmax(logits, axis=1), gt, cfg.smoothing_eps)
    return ce.scale(cfg.lambda_ce) + dice.scale(cfg.lambda_dice)


def nearest_label_resize(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor label resize; keeps labels integral."""
    labels = np.asarray(labels)
    n, h, w = labels.shape
    iy = np.minimum(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    ix = np.minimum(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return labels[:, iy[:, None], ix[None, :]]


def total_loss(stage1_logits: Tensor, stage2_logits: Tensor | None, gt: np.ndarray,
               epoch: int, cfg: LossConfig) -> tuple[Tensor, dict]:
    """Convex combination of the two stages' losses.

    Stage 1 is supervised at its own (quarter) resolution against
    nearest-downsampled labels; stage 2 against labels at its output
    resolution. Returns the scalar loss and the per-term breakdown.
    """
    gt = np.asarray(gt)
    if gt.ndim != 3:
        raise ShapeError(f"expected (N,H,W) labels, got {gt.shape}")
    gt1 = nearest_label_resize(gt, stage1_logits.shape[2], stage1_logits.shape[3])
    l1 = stage_loss(stage1_logits, gt1, cfg)
    if stage2_logits is None:
        return l1, {"lambda_w": 1.0, "stage1": l1.item(), "stage2": None}
    if stage2_logits.shape[2:] == gt.shape[1:]:
        gt2 = gt
    else:
        gt2 = nearest_label_resize(gt, stage2_logits.shape[2], stage2_logits.shape[3])
    l2 = stage_loss(stage2_logits, gt2, cfg)
    lam = lambda_w(epoch, cfg)
    total = l1.scale(lam) + l2.scale(1.0 - lam)
    return total, {"lambda_w": lam, "stage1": l1.item(), "stage2": l2.item()}
