"""Evaluation metrics: per-class Dice overlap and Hausdorff distances.

Point sets are the labeled pixels themselves; distances are Euclidean
between pixel centers, computed by (chunked) brute-force pairwise search.
The ``avg`` Hausdorff variant (mean of the two directed average
nearest-neighbor distances) is the reporting default; ``max`` is the
classical worst-case form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class MetricReport:
    per_class_dice: list
    mean_dice: float
    per_class_hd: list          # None entries where undefined (empty sets)
    mean_hd: float | None
    undefined_hd_classes: list = field(default_factory=list)

    def rows(self) -> list[tuple]:
        out = []
        for i, (d, h) in enumerate(zip(self.per_class_dice, self.per_class_hd)):
            out.append((i, d, h))
        return out


def dice_metric(pred_labels: np.ndarray, gt_labels: np.ndarray, class_id: int) -> float:
    """2|A∩B| / (|A|+|B|); 1 when both sets are empty, 0 when exactly one is."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ShapeError(f"label maps differ: {pred_labels.shape} vs {gt_labels.shape}")
    a = pred_labels == class_id
    b = gt_labels == class_id
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def _directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Nearest-neighbor distance from each src point to dst (brute force,
    chunked to bound memory)."""
    out = np.empty(len(src))
    step = 512
    for lo in range(0, len(src), step):
        block = src[lo : lo + step]
        d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=-1)
        out[lo : lo + step] = np.sqrt(d2.min(axis=1))
    return out


def hausdorff(pred_set: np.ndarray, gt_set: np.ndarray, variant: str = "avg") -> float | None:
    """Hausdorff distance between two point sets; None when either is empty.

    variant "max": max of the two directed maxima. variant "avg": mean of
    the two directed average nearest-neighbor distances.
    """
    if variant not in ("max", "avg"):
        raise ValueError(f"unknown variant {variant!r}")
    pred_set = np.atleast_2d(np.asarray(pred_set, dtype=np.float64))
    gt_set = np.atleast_2d(np.asarray(gt_set, dtype=np.float64))
    if pred_set.size == 0 or gt_set.size == 0:
        return None
    d_pg = _directed_distances(pred_set, gt_set)
    d_gp = _directed_distances(gt_set, pred_set)
    if variant == "max":
        return float(max(d_pg.max(), d_gp.max()))
    return float((d_pg.mean() + d_gp.mean()) / 2.0)


def _points_of(labels: np.ndarray, class_id: int) -> np.ndarray:
    return np.argwhere(np.asarray(labels) == class_id).astype(np.float64)


def evaluate_sample(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int,
                    hd_variant: str = "avg") -> tuple[list, list]:
    """Per-class Dice and Hausdorff for one prediction, foreground classes only."""
    dices, hds = [], []
    for cls in range(1, num_classes):
        dices.append(dice_metric(pred_labels, gt_labels, cls))
        hds.append(hausdorff(_points_of(pred_labels, cls), _points_of(gt_labels, cls), hd_variant))
    return dices, hds


def aggregate_report(per_sample: list[tuple[list, list]]) -> MetricReport:
    """Average per-sample metrics; Hausdorff entries undefined for a class
    are skipped in its mean and the class is flagged when nothing defined."""
    n_cls = len(per_sample[0][0])
    dice_cols = [[] for _ in range(n_cls)]
    hd_cols = [[] for _ in range(n_cls)]
    for dices, hds in per_sample:
        for i in range(n_cls):
            dice_cols[i].append(dices[i])
            if hds[i] is not None:
                hd_cols[i].append(hds[i])
    per_class_dice = [float(np.mean(col)) for col in dice_cols]
    per_class_hd = [float(np.mean(col)) if col else None for col in hd_cols]
    undefined = [i + 1 for i, col in enumerate(hd_cols) if not col]
    defined = [h for h in per_class_hd if h is not None]
    return MetricReport(
        per_class_dice=per_class_dice,
        mean_dice=float(np.mean(per_class_dice)),
        per_class_hd=per_class_hd,
        mean_hd=float(np.mean(defined)) if defined else None,
        undefined_hd_classes=undefined,
    )
